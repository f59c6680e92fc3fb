"""Command-line entry point wiring configs to the pipeline.

Commands: generate, train-diffusion, finetune, eval, ablate, report.
Exit codes: 0 success, 2 validation/config failure, 3 numerical failure.
Set BLOCKGEN_THREADS to pin BLAS thread counts before numpy loads (the
variable is honored only when the CLI is the process entry point).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_NUMERIC = 3


def _apply_thread_env():
    threads = os.environ.get("BLOCKGEN_THREADS")
    if threads:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ.setdefault(var, threads)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="blockgen",
                                     description="counterfactual set generation and "
                                                 "dual-encoder fine-tuning pipeline")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("generate", "build and persist a counterfactual dataset"),
        ("train-diffusion", "train the guided denoiser"),
        ("finetune", "fine-tune the dual encoder on a dataset"),
        ("eval", "evaluate an encoder on the held-out benchmark"),
        ("ablate", "run the ablation grid"),
        ("report", "emit plots and tables from results"),
    ):
        cmd = sub.add_parser(name, help=help_text)
        cmd.add_argument("--config", type=str, default=None, help="JSON run config")
        cmd.add_argument("--seed", type=int, default=None, help="master seed override")
        cmd.add_argument("--out", type=str, default=None, help="output directory")
        cmd.add_argument("--override", action="append", default=[],
                         metavar="KEY.PATH=VALUE", help="config override (JSON value)")
    return parser


def _echo(config):
    from . import __version__

    # output_dir is location metadata, not content; keeping it out makes
    # artifact hashes identical across working directories
    stripped = {k: v for k, v in config.items() if k != "output_dir"}
    return {"config": stripped, "tool_version": __version__}


def _paths(config):
    out = Path(config["output_dir"])
    exp = config["experiment_id"]
    return {
        "out": out,
        "dataset": out / "datasets" / exp,
        "denoiser": out / "checkpoints" / f"{exp}-denoiser.ckpt",
        "encoder": out / "checkpoints" / f"{exp}-encoder.ckpt",
        "overlay": out / "checkpoints" / f"{exp}-adapters.ckpt",
        "benchmark": out / "benchmarks" / exp,
        "results": out / "results",
        "report": out / "report" / exp,
    }


def _build_factory(config, paths):
    from .diffusion import Denoiser
    from .configs import grammar_from
    from .errors import ConfigError
    from .sets import DiffusionFactory, MixedFactory, StitchedFactory
    from .storage import file_sha256

    ds = config["dataset"]
    grammar = grammar_from(config)
    height, width = config["diffusion"]["height"], config["diffusion"]["width"]
    stitched = StitchedFactory(height, width, grammar)
    if ds["stitched_fraction"] >= 1.0:
        return MixedFactory(stitched, None, 1.0)
    ckpt = ds["denoiser_checkpoint"] or paths["denoiser"]
    if not Path(ckpt).exists():
        raise ConfigError(
            f"stitched_fraction < 1.0 needs a trained denoiser checkpoint at {ckpt}"
        )
    model, _ = Denoiser.load(ckpt)
    diffusion = DiffusionFactory(model, file_sha256(ckpt), grammar,
                                 condition=ds["condition"], init=ds["init"],
                                 num_steps=ds["num_steps"])
    return MixedFactory(stitched, diffusion, ds["stitched_fraction"])


def _build_scorer(config, paths):
    from .bench import OracleScorer
    from .configs import grammar_from
    from .encoders import DualEncoder
    from .errors import ConfigError

    ds = config["dataset"]
    kind = ds["filter_scorer"]
    if kind == "none":
        return None
    if kind == "oracle":
        return OracleScorer(grammar_from(config))
    if kind == "encoder":
        ckpt = ds["filter_encoder_checkpoint"]
        if not ckpt or not Path(ckpt).exists():
            raise ConfigError("filter_scorer=encoder needs filter_encoder_checkpoint")
        return DualEncoder.load(ckpt)
    raise ConfigError(f"unknown filter_scorer {kind!r}")


def cmd_generate(config) -> int:
    from .configs import grammar_from
    from .sets import build_dataset
    from .storage import write_json

    paths = _paths(config)
    ds = config["dataset"]
    factory = _build_factory(config, paths)
    scorer = _build_scorer(config, paths)
    manifest, manifest_hash = build_dataset(
        paths["dataset"], n_sets=ds["n_sets"], m=ds["m"], mix=ds["mix"],
        master_seed=config["seed"], factory=factory, grammar_config=grammar_from(config),
        height=config["diffusion"]["height"], width=config["diffusion"]["width"],
        scorer=scorer, filter_percentile=ds["filter_percentile"],
        config_echo=_echo(config), dataset_id=config["experiment_id"],
    )
    print(f"dataset written to {paths['dataset']} (manifest sha256 {manifest_hash})")
    return EXIT_OK


def cmd_train_diffusion(config) -> int:
    from .configs import grammar_from
    from .diffusion import (Denoiser, DiffusionConfig, Vocabulary,
                            build_training_items, train_denoiser)
    from .rng import derive_seed
    from .storage import write_json

    paths = _paths(config)
    grammar = grammar_from(config)
    dcfg = DiffusionConfig.from_json_dict(config["diffusion"])
    vocab = Vocabulary.from_grammar(grammar)
    td = config["train_diffusion"]
    opt_state = None
    if td["resume_from"]:
        model, extras = Denoiser.load(td["resume_from"])
        opt_state = extras if any(k.startswith("adam.") for k in extras) else None
    else:
        model = Denoiser(dcfg, vocab, init_seed=derive_seed(config["seed"], "denoiser"))
    seeds = [derive_seed(config["seed"], "train-scene", i) for i in range(td["n_scenes"])]
    items = build_training_items(seeds, vocab, dcfg, grammar)
    train_denoiser(model, items, epochs=td["epochs"], batch_size=td["batch_size"],
                   lr=td["lr"], seed=config["seed"], optimizer_state=opt_state,
                   log_every=max(1, td["epochs"] // 10))
    paths["denoiser"].parent.mkdir(parents=True, exist_ok=True)
    sha = model.save(paths["denoiser"])
    curve_path = paths["out"] / "results" / f"{config['experiment_id']}-diffusion-loss.json"
    curve_path.parent.mkdir(parents=True, exist_ok=True)
    write_json(curve_path, {"loss_per_epoch": model.loss_log, **_echo(config)})
    print(f"denoiser checkpoint {paths['denoiser']} (sha256 {sha}); "
          f"loss {model.loss_log[0]:.4f} -> {model.loss_log[-1]:.4f}")
    return EXIT_OK


def cmd_finetune(config) -> int:
    from .bench import finetune
    from .configs import grammar_from
    from .diffusion import Vocabulary
    from .encoders import AdapterConfig, DualEncoder, EncoderConfig
    from .errors import ConfigError
    from . import losses as ls
    from .sets import load_dataset
    from .storage import write_json

    paths = _paths(config)
    dataset_dir = config["finetune"]["dataset_dir"] or paths["dataset"]
    if not (Path(dataset_dir) / "manifest.json").exists():
        raise ConfigError(f"no dataset manifest under {dataset_dir}; run generate first")
    _, sets = load_dataset(dataset_dir)
    grammar = grammar_from(config)
    enc_cfg = dict(config["encoder"])
    init_seed = enc_cfg.pop("init_seed")
    encoder = DualEncoder(EncoderConfig.from_json_dict(enc_cfg),
                          Vocabulary.from_grammar(grammar), init_seed=init_seed)
    paths["encoder"].parent.mkdir(parents=True, exist_ok=True)
    base_sha = encoder.save(paths["encoder"])
    adapter_cfg = AdapterConfig(config["adapters"]["rank"], config["adapters"]["alpha"],
                                tuple(config["adapters"]["target_layers"]))
    loss_params = ls.LossParams(config["loss"]["init_tau"], config["loss"]["init_bias"])
    log = finetune(encoder, sets, loss_mode=config["loss"]["mode"],
                   epochs=config["finetune"]["epochs"], lr=config["finetune"]["lr"],
                   sets_per_batch=config["finetune"]["sets_per_batch"],
                   adapter_config=adapter_cfg, seed=config["seed"],
                   grammar_config=grammar, loss_params=loss_params)
    overlay_sha = encoder.save_adapter_overlay(
        paths["overlay"], base_sha, adapter_cfg,
        loss_param_arrays={k: v.data for k, v in loss_params.named().items()},
    )
    log_path = paths["results"] / f"{config['experiment_id']}-finetune-log.json"
    log_path.parent.mkdir(parents=True, exist_ok=True)
    write_json(log_path, {"steps": log, **_echo(config)})
    print(f"encoder base {paths['encoder']} + adapters {paths['overlay']} "
          f"(sha256 {overlay_sha}); {len(log)} steps logged")
    return EXIT_OK


def _load_benchmark(config, paths):
    from .bench import build_benchmark, load_benchmark, save_benchmark
    from .configs import grammar_from
    from .rng import derive_seed

    bench_dir = config["benchmark"]["dir"] or paths["benchmark"]
    bench_dir = Path(bench_dir)
    if (bench_dir / "benchmark.json").exists():
        return load_benchmark(bench_dir)
    grammar = grammar_from(config)
    train_seeds = None
    manifest_path = paths["dataset"] / "manifest.json"
    if manifest_path.exists():
        from .storage import read_json

        manifest = read_json(manifest_path)
        master = manifest["config"]["master_seed"]
        train_seeds = {
            derive_seed(master, "set", i, "scene")
            for i in range(manifest["config"]["n_sets"])
        }
    items = build_benchmark(config["benchmark"]["n_per_kind"],
                            derive_seed(config["seed"], "benchmark"),
                            grammar, config["encoder"]["height"],
                            config["encoder"]["width"], train_scene_seeds=train_seeds)
    save_benchmark(items, bench_dir, grammar)
    return items


def cmd_eval(config) -> int:
    from .bench import evaluate
    from .diffusion import Vocabulary
    from .configs import grammar_from
    from .encoders import DualEncoder
    from .storage import write_json

    paths = _paths(config)
    items = _load_benchmark(config, paths)
    if paths["encoder"].exists():
        encoder = DualEncoder.load(paths["encoder"])
        if paths["overlay"].exists():
            encoder.load_adapter_overlay(paths["overlay"])
        label = "finetuned" if paths["overlay"].exists() else "base"
    else:
        from .encoders import EncoderConfig

        enc_cfg = dict(config["encoder"])
        init_seed = enc_cfg.pop("init_seed")
        encoder = DualEncoder(EncoderConfig.from_json_dict(enc_cfg),
                              Vocabulary.from_grammar(grammar_from(config)),
                              init_seed=init_seed)
        label = "untrained"
    result = evaluate(encoder, items, metadata={"encoder": label})
    out_path = paths["results"] / f"{config['experiment_id']}-eval-{label}.json"
    out_path.parent.mkdir(parents=True, exist_ok=True)
    write_json(out_path, {"result": result.to_json_dict(), **_echo(config)})
    print(f"eval ({label}): " + ", ".join(
        f"{k}={v:.3f}" for k, v in sorted(result.per_kind_accuracy.items())
    ))
    print(f"written to {out_path}")
    return EXIT_OK


def cmd_ablate(config) -> int:
    from .bench import run_ablation
    from .configs import grammar_from
    from .diffusion import Vocabulary
    from .encoders import DualEncoder, EncoderConfig
    from .errors import ConfigError
    from .report import ablation_table_csv
    from .sets import load_dataset
    from .storage import write_json

    paths = _paths(config)
    cells = config["ablation"]["cells"]
    if not cells:
        raise ConfigError("ablation.cells is empty")
    datasets = {}
    for cell in cells:
        name = cell.get("dataset")
        if name not in datasets:
            ds_dir = Path(name) if Path(name).is_absolute() else paths["out"] / "datasets" / name
            if not (ds_dir / "manifest.json").exists():
                raise ConfigError(f"cell dataset {name!r} not found at {ds_dir}")
            datasets[name] = load_dataset(ds_dir)[1]
    items = _load_benchmark(config, paths)
    grammar = grammar_from(config)
    enc_cfg = dict(config["encoder"])
    enc_cfg.pop("init_seed")
    vocab = Vocabulary.from_grammar(grammar)

    def encoder_factory(seed):
        return DualEncoder(EncoderConfig.from_json_dict(enc_cfg), vocab, init_seed=seed)

    rows = run_ablation(cells, config["ablation"]["seeds"], datasets, items,
                        encoder_factory, grammar)
    paths["results"].mkdir(parents=True, exist_ok=True)
    table = paths["results"] / f"{config['experiment_id']}-ablation.json"
    write_json(table, {"rows": rows, **_echo(config)})
    ablation_table_csv(rows, paths["results"] / f"{config['experiment_id']}-ablation.csv")
    print(f"ablation grid: {len(rows)} cells -> {table}")
    return EXIT_OK


def cmd_report(config) -> int:
    from .diffusion import DiffusionConfig
    from .report import emit_report
    from .storage import read_json

    paths = _paths(config)
    results = {"experiment_id": config["experiment_id"], **_echo(config)}
    gaps = {}
    results_dir = paths["results"]
    if results_dir.exists():
        for path in sorted(results_dir.glob(f"{config['experiment_id']}-eval-*.json")):
            data = read_json(path)
            label = data["result"]["metadata"].get("encoder", path.stem)
            all_gaps = [g for v in data["result"]["gaps"].values() for g in v]
            if all_gaps:
                gaps[label] = all_gaps
            results[f"eval_{label}"] = data["result"]["per_kind_accuracy"]
        ablation_path = results_dir / f"{config['experiment_id']}-ablation.json"
        if ablation_path.exists():
            results["ablation"] = read_json(ablation_path)["rows"]
    if gaps:
        results["gaps_by_model"] = gaps
    written = emit_report(results, paths["report"],
                          DiffusionConfig.from_json_dict(config["diffusion"]))
    print("report artifacts: " + ", ".join(sorted(written)))
    return EXIT_OK


COMMANDS = {
    "generate": cmd_generate,
    "train-diffusion": cmd_train_diffusion,
    "finetune": cmd_finetune,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "report": cmd_report,
}


def main(argv=None) -> int:
    _apply_thread_env()
    parser = build_parser()
    args = parser.parse_args(argv)
    from .configs import load_config
    from .errors import ConfigError, DivergenceError

    try:
        config = load_config(args.config, args.override, args.seed, args.out)
        return COMMANDS[args.command](config)
    except DivergenceError as err:
        print(f"numerical failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, ValueError, FileNotFoundError) as err:
        print(f"validation failure: {err}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    raise SystemExit(main())
