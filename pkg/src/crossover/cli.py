"""``crossover`` command line: generate, sample, train, predict, eval, rfcheck, gradcheck, ablate.

Exit status 0 on success, 2 for configuration errors, 3 for runtime
failures; failures print one ``error: <kind>: <message>`` line on stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .config import ConfigError, ExperimentConfig, dump_config, load_config
from .dataio import load_mask, synth_generate, write_dataset
from .experiments import (
    Dataset, load_dataset, network_spec, predict_all, run_ablation, sample_dataset, summary,
    synthetic_spec, synthetic_splits, training_set, train_config, write_ablation,
)
from .inference import write_prediction
from .losses import LossConfig, total_loss
from .metrics import evaluate, write_metrics_csv
from .network import forward, init_xavier, load_params, preset_spec, save_params
from .patches import PatchExtractor, SampleSet
from .receptive import ConfigurationError, cross_check
from .training import train

logger = logging.getLogger("crossover")

COMMANDS = ("generate", "sample", "train", "predict", "eval", "rfcheck", "gradcheck", "ablate")


class RunError(RuntimeError):
    pass


# -- artifacts layout ------------------------------------------------------
# <out>/data/manifest.csv          generate
# <out>/samples/<id>.csv           sample
# <out>/model.params, history.csv  train
# <out>/pred/<id>_{prob,mask}.pgm  predict
# <out>/metrics.csv                eval

def out_dir(cfg: ExperimentConfig) -> Path:
    p = Path(cfg.output.dir)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _dataset(cfg: ExperimentConfig) -> Dataset:
    generated = out_dir(cfg) / "data" / "manifest.csv"
    if not cfg.data.manifest and generated.is_file():
        cfg.data.manifest = str(generated)
    return load_dataset(cfg)


def cmd_generate(cfg: ExperimentConfig) -> str:
    if cfg.data.manifest:
        raise ConfigError("generate writes a synthetic dataset; unset data.manifest")
    pairs = synth_generate(synthetic_spec(cfg), cfg.data.count)
    manifest = write_dataset(out_dir(cfg) / "data", pairs, synthetic_splits(cfg))
    return f"generated {len(pairs)} images: {manifest}"


def _samples(cfg: ExperimentConfig, ds: Dataset) -> list[SampleSet]:
    folder = out_dir(cfg) / "samples"
    paths = [folder / f"{e.image_id}.csv" for e in ds.train]
    if all(p.is_file() for p in paths):
        return [SampleSet.from_csv(p) for p in paths]
    return sample_dataset(cfg, ds.train)


def cmd_sample(cfg: ExperimentConfig) -> str:
    ds = _dataset(cfg)
    folder = out_dir(cfg) / "samples"
    folder.mkdir(exist_ok=True)
    sets = sample_dataset(cfg, ds.train)
    for e, s in zip(ds.train, sets):
        s.to_csv(folder / f"{e.image_id}.csv")
    return f"wrote {len(sets)} sample sets ({sum(len(s) for s in sets)} centers) to {folder}"


def cmd_train(cfg: ExperimentConfig) -> str:
    ds = _dataset(cfg)
    net = network_spec(cfg, [e.image for e in ds.train])
    data = training_set(ds.train, _samples(cfg, ds))
    params, history = train(net, data, train_config(cfg))
    out = out_dir(cfg)
    save_params(params, out / "model.params", net)
    history.to_csv(out / "history.csv")
    (out / "config.ini").write_text(dump_config(cfg))
    return f"trained {len(history.records)} epochs, final loss {history.records[-1].loss:.6f}: {out / 'model.params'}"


def _model(cfg: ExperimentConfig):
    path = out_dir(cfg) / "model.params"
    if not path.is_file():
        raise RunError(f"no trained model at {path}; run train first")
    params, net = load_params(path)
    if net is None:
        raise RunError(f"{path} carries no network description")
    return params, net


def cmd_predict(cfg: ExperimentConfig) -> str:
    params, net = _model(cfg)
    ds = _dataset(cfg)
    folder = out_dir(cfg) / "pred"
    folder.mkdir(exist_ok=True)
    preds = predict_all(cfg, params, net, ds.test)
    for e, p in zip(ds.test, preds):
        write_prediction(p, folder / e.image_id, raw=cfg.output.raw_probability)
    return f"predicted {len(preds)} images into {folder}"


def cmd_eval(cfg: ExperimentConfig) -> str:
    ds = _dataset(cfg)
    folder = out_dir(cfg) / "pred"
    rows = []
    for e in ds.test:
        path = folder / f"{e.image_id}_mask.pgm"
        if not path.is_file():
            raise RunError(f"missing prediction {path}; run predict first")
        rows.append((e.image_id, evaluate(load_mask(path), e.mask)))
    target = out_dir(cfg) / "metrics.csv"
    write_metrics_csv(rows, target)
    mean = float(np.mean([r.dsc for _, r in rows])) if rows else float("nan")
    return f"mean dsc {mean:.6f} over {len(rows)} images: {target}"


def cmd_rfcheck(cfg: ExperimentConfig, count: int = 100) -> str:
    cases, mismatches = cross_check(count, seed=cfg.seed)
    report = f"stacks: {count} cases: {cases} mismatches: {mismatches}"
    (out_dir(cfg) / "rfcheck.txt").write_text(report + "\n")
    if mismatches:
        raise RunError(report)
    return report


def gradcheck_report(cfg: ExperimentConfig, per_param: int = 20, batch: int = 2, tolerance: float = 1e-4):
    net = preset_spec(cfg.network.preset).with_dropout(0.0)
    rng = ad.make_rng(cfg.seed)
    params = init_xavier(net, rng, np.float64)
    # bias away from zero so gradients of every bias are exercised
    for name, t in params.items():
        if name.endswith(".b"):
            t.data[...] = rng.uniform(-0.05, 0.05, size=t.shape)
    h, w = max(2 * net.long_side, 64), max(2 * net.long_side, 64)
    img = rng.random((h, w))
    centers = np.stack([rng.integers(0, h, batch), rng.integers(0, w, batch)], axis=1)
    v, hz = PatchExtractor(img, net.long_side, net.short_side).extract(centers)
    labels = rng.integers(0, 2, batch)
    loss_cfg = LossConfig("full", cfg.loss.lambda_cs, cfg.loss.epsilon)

    def f():
        out = forward(params, net, {"vertical": v, "horizontal": hz})
        return total_loss(out.probability, labels, out.slices, loss_cfg).total

    # a small step keeps central differences from straddling ReLU / max-pool kinks
    return ad.finite_diff_check(f, dict(params), step=1e-7, tolerance=tolerance, per_param=per_param, rng=rng)


def cmd_gradcheck(cfg: ExperimentConfig) -> str:
    rep = gradcheck_report(cfg)
    verdict = "PASS" if rep.passed(1e-4) else "FAIL"
    line = f"checked: {rep.checked} max_rel_err: {rep.max_rel_err:.3e} max_rel_err < 1e-4: {verdict}"
    (out_dir(cfg) / "gradcheck.txt").write_text(line + "\n")
    if verdict == "FAIL":
        raise RunError(line + (f" failures: {rep.failures[0]}" if rep.failures else ""))
    return line


def cmd_ablate(cfg: ExperimentConfig) -> str:
    results, sweep = run_ablation(cfg, _dataset(cfg))
    out = out_dir(cfg)
    write_ablation(results, out / "ablation.csv")
    if sweep:
        write_ablation(sweep, out / "layer_sweep.csv")
    return "ablation " + json.dumps({k: round(v, 4) for k, v in summary(results).items()}, sort_keys=True)


HANDLERS = {
    "generate": cmd_generate, "sample": cmd_sample, "train": cmd_train, "predict": cmd_predict,
    "eval": cmd_eval, "rfcheck": cmd_rfcheck, "gradcheck": cmd_gradcheck, "ablate": cmd_ablate,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="crossover", description=__doc__.splitlines()[0])
    ap.add_argument("command", choices=COMMANDS)
    ap.add_argument("--config", help="INI config file")
    ap.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                    help="override one config value (repeatable)")
    ap.add_argument("--seed", type=int, help="run seed (training, rfcheck, gradcheck)")
    ap.add_argument("--out", help="output directory (overrides output.dir)")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def _oneline(exc: BaseException) -> str:
    return " ".join(str(exc).split()) or type(exc).__name__


def main(argv: list[str] | None = None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.overrides)
        if args.seed is not None:
            cfg.seed = args.seed
        if args.out:
            cfg.output.dir = args.out
    except (ConfigError, ConfigurationError) as exc:
        print(f"error: config: {_oneline(exc)}", file=sys.stderr)
        return 2
    try:
        message = HANDLERS[args.command](cfg)
    except (ConfigError, ConfigurationError) as exc:
        print(f"error: config: {_oneline(exc)}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - every failure becomes one diagnostic line
        print(f"error: runtime: {type(exc).__name__}: {_oneline(exc)}", file=sys.stderr)
        return 3
    print(message)
    return 0


if __name__ == "__main__":
    sys.exit(main())
