"""Tour of the scene grammar: scenes, captions, perturbations, permutations.

Run with:  python demos/01_scene_grammar.py
"""

from blockgen import grammar as gr

cfg = gr.DEFAULT_CONFIG

# A scene is a handful of entities on a 3x3 cell grid plus stated relations.
scene = gr.generate_scene(7, cfg)
print("scene entities:")
for e in scene.entities:
    print(f"  {e.id}: {e.size} {e.color} {e.state} {e.category} at {e.cell}  box={e.box(cfg).as_list()}")
print("relations:", [(r.subject, r.predicate, r.object) for r in scene.relations])

# Captions are token sequences and round-trip exactly.
caption = gr.render_caption(scene, cfg)
print("\ncaption:", " ".join(caption))
assert gr.parse_caption(caption, cfg) == scene
print("parse(render(scene)) == scene")

# Each perturbation kind makes one controlled edit.
for kind in gr.PERTURBATION_KINDS:
    try:
        pert, new = gr.perturb(scene, kind, 11, cfg)
    except Exception as err:
        print(f"\n{kind}: unavailable ({err})")
        continue
    print(f"\n{kind}: target={pert.target} payload={pert.payload}")
    print("  ", " ".join(gr.render_caption(new, cfg)))

# Word-order permutation builds ARO-style hard negatives: same tokens,
# different meaning.
permuted = gr.permute_word_order(caption, 3, cfg)
print("\npermuted :", " ".join(permuted))
print("same tokens:", sorted(permuted) == sorted(caption))
print("different meaning:",
      gr.canonical_form(gr.parse_caption(permuted, cfg), cfg) != gr.canonical_form(scene, cfg))
