"""Command line entry point: ``hypermotion <subcommand> ...``.

Failures print one JSON line ``{"error": <type>, "message": <text>}`` on
stderr and exit with status 1.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import data
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import DESK, ConfigFileError, RunConfig, dump_config_text, load_config, parse_config_text
from .encoder import affinity, block_incidences, embed_trajectories
from .evaluation import EvalReport, emit_report, evaluate, read_rmse_csv, rmse, run_ablation
from .generator import VARIANTS, Rhino
from .giraffe import N_MODES, Giraffe
from .hypergraphs import write_affinity_csv, write_incidence_csv
from .nn import ParameterStore
from .pipeline import min_of_k, train_giraffe, train_rhino

log = logging.getLogger("hypermotion")


class CliError(RuntimeError):
    pass


# ---- shared helpers -----------------------------------------------------

def _config(args) -> RunConfig:
    cfg = load_config(overrides=DESK if args.preset == "desk" else None)
    if args.config:
        cfg = parse_config_text(Path(args.config).read_text(), cfg)
    for item in args.set or []:
        cfg = parse_config_text(item, cfg)
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


def _scenarios(args, cfg: RunConfig) -> list:
    scen = data.load_scenarios(args.data, min_neighbors=cfg.min_neighbors,
                               neighborhood=cfg.neighborhood, stride=cfg.stride,
                               intent_threshold=cfg.intent_threshold)
    if not scen:
        raise CliError(f"no complete scenario windows in {args.data}")
    split = getattr(args, "split", "train")
    if split == "all":
        return scen
    train, test = data.split_scenarios(scen, cfg.seed, cfg.train_fraction)
    return train if split == "train" else test


def scenario_from_csv(path, cfg: RunConfig, target: int | None = None) -> data.ScenarioBatch:
    """First full window of the target when the file is long enough, else its last history."""
    recs = data.ingest(path)
    tracks = sorted({r.vehicle_id for r in recs})
    vid = tracks[0] if target is None else target
    wins = data.window_scenarios(recs, neighborhood=cfg.neighborhood, stride=cfg.stride,
                                 targets=[vid] if vid in tracks else [],
                                 intent_threshold=cfg.intent_threshold)
    if wins:
        return wins[0]
    return data.history_only_scenario(recs, vid, neighborhood=cfg.neighborhood)


def _load_models(path, need_rhino: bool) -> tuple[RunConfig, Giraffe, Rhino | None]:
    store, manifest = load_checkpoint(path)
    meta = manifest.get("meta", {})
    if "config" not in meta:
        raise CheckpointError(f"{path}: checkpoint has no stored config")
    cfg = RunConfig.from_dict(meta["config"])
    giraffe = Giraffe(cfg.giraffe(), store)
    rhino = None
    if need_rhino:
        if meta.get("kind") != "rhino":
            raise CheckpointError(f"{path}: expected a generator checkpoint, found {meta.get('kind')!r}")
        rhino = Rhino(cfg.rhino(meta.get("variant", "full")), store, meta.get("eval_tau"))
    return cfg, giraffe, rhino


def _write_rows(path, header, rows) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _f(v) -> str:
    return repr(float(v))


# ---- subcommands --------------------------------------------------------

def cmd_ingest(args) -> None:
    recs = data.ingest(args.input, args.format)
    data.write_canonical(args.out, recs)
    print(f"wrote {len(recs)} records to {args.out}")


def cmd_synth(args) -> None:
    paths = data.write_synth(args.out, args.scenes, seed=args.seed or 0, frames=args.frames)
    print(f"wrote {len(paths)} scenes to {args.out}")


def cmd_train_giraffe(args) -> None:
    cfg = _config(args)
    scen = _scenarios(args, cfg)
    model, hist = train_giraffe(scen, cfg, steps=args.steps)
    save_checkpoint(args.out, model.store, cfg.seed,
                    {"kind": "giraffe", "config": cfg.to_dict(), "final_loss": hist.last()})
    print(f"trained on {len(scen)} scenarios for {len(hist.steps)} steps; "
          f"final L_pred {hist.last().get('pred', float('nan')):.6f}")


def cmd_train_rhino(args) -> None:
    cfg_g, giraffe, _ = _load_models(args.giraffe_ckpt, need_rhino=False)
    cfg = _config(args)
    scen = _scenarios(args, cfg)
    model, hist = train_rhino(scen, giraffe, cfg, variant=args.variant, steps=args.steps)
    # one file carries both parameter sets; prefixes keep them apart
    for name in giraffe.store.names():
        model.store.set(name, giraffe.store.value(name))
    merged = cfg.to_dict()
    for key in ("hidden", "d_embed", "cheb_order", "dgcn_layers", "F"):
        if merged[key] != getattr(cfg_g, key):
            raise CliError(f"config key {key} differs from the predictor checkpoint "
                           f"({merged[key]} vs {getattr(cfg_g, key)})")
    save_checkpoint(args.out, model.store, cfg.seed,
                    {"kind": "rhino", "variant": args.variant, "config": merged,
                     "eval_tau": model.eval_tau, "final_loss": hist.last()})
    print(f"trained {args.variant} on {len(scen)} scenarios for {len(hist.steps)} steps")


def cmd_predict(args) -> None:
    cfg, giraffe, _ = _load_models(args.ckpt, need_rhino=False)
    sc = scenario_from_csv(args.scenario, cfg, args.target)
    traj, probs = giraffe.predict(data.collate([sc]))
    rows = []
    for a, vid in enumerate(sc.vehicle_ids):
        for m in range(N_MODES):
            for f in range(traj.shape[0]):
                x, y = traj[f, a, m] + np.asarray(sc.origin)
                rows.append([vid, m, f + 1, _f(x), _f(y), _f(probs[a, m])])
    _write_rows(args.out, ["agent", "mode", "step", "x", "y", "prob"], rows)
    print(f"wrote {len(rows)} rows to {args.out}")


def cmd_generate(args) -> None:
    cfg, giraffe, rhino = _load_models(args.ckpt, need_rhino=True)
    sc = scenario_from_csv(args.scenario, cfg, args.target)
    batch = data.collate([sc])
    modes, probs = giraffe.predict(batch)
    samples = rhino.sample(batch, modes, probs, args.k, args.seed, source=args.source)
    rows = []
    for a, vid in enumerate(sc.vehicle_ids):
        for k in range(samples.shape[2]):
            for f in range(samples.shape[0]):
                x, y = samples[f, a, k] + np.asarray(sc.origin)
                rows.append([vid, k, f + 1, _f(x), _f(y)])
    _write_rows(args.out, ["agent", "sample", "step", "x", "y"], rows)
    print(f"wrote {len(rows)} rows to {args.out}")


def read_samples_csv(path) -> tuple[list[int], np.ndarray]:
    """Vehicle ids and samples [F, N, K, 2] from a ``generate`` CSV."""
    with Path(path).open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise CliError(f"{path}: no sample rows")
    agents = sorted({int(r["agent"]) for r in rows})
    ks = sorted({int(r["sample"]) for r in rows})
    steps = sorted({int(r["step"]) for r in rows})
    out = np.full((len(steps), len(agents), len(ks), 2), np.nan)
    ai = {a: i for i, a in enumerate(agents)}
    for r in rows:
        out[int(r["step"]) - 1, ai[int(r["agent"])], int(r["sample"])] = (float(r["x"]), float(r["y"]))
    if np.isnan(out).any():
        raise CliError(f"{path}: incomplete sample grid")
    return agents, out


def cmd_evaluate(args) -> None:
    if args.samples:
        cfg = _config(args)
        sc = scenario_from_csv(args.scenario, cfg, args.target)
        if not sc.future_truth.any():
            raise CliError(f"{args.scenario}: scenario has no future frames to score against")
        agents, samples = read_samples_csv(args.samples)
        order = [agents.index(v) for v in sc.vehicle_ids]
        truth = sc.future_truth + np.asarray(sc.origin)
        best = min_of_k(samples[:, order], truth)
        report = rmse(best, truth)
        report.fingerprint = cfg.fingerprint()
        report.flags = {"k": int(samples.shape[2]), "source": "samples"}
    else:
        cfg, giraffe, rhino = _load_models(args.ckpt, need_rhino=True)
        scen = _scenarios(args, cfg)
        report = evaluate(rhino, giraffe, scen, args.k or cfg.k_samples, args.seed or 0, cfg)
    emit_report(report, args.out)
    print(" ".join(f"RMSE@{h}={report.values[h]:.4f}" for h in report.horizons))


def cmd_ablate(args) -> None:
    _, giraffe, _ = _load_models(args.giraffe_ckpt, need_rhino=False)
    cfg = _config(args)
    scen = data.load_scenarios(args.data, min_neighbors=cfg.min_neighbors,
                               neighborhood=cfg.neighborhood, stride=cfg.stride,
                               intent_threshold=cfg.intent_threshold)
    train, test = data.split_scenarios(scen, cfg.seed, cfg.train_fraction)
    reports = []
    for variant in args.variants.split(","):
        _, rep = run_ablation(cfg, variant, train, test, giraffe, seed=args.eval_seed, steps=args.steps)
        reports.append(rep)
        print(f"{variant}: RMSE@50={rep.values.get(50, float('nan')):.4f}")
    emit_report(reports, args.out)


def cmd_report(args) -> None:
    reports = []
    for src in args.inputs:
        src = Path(src)
        csv_path = src / "rmse.csv" if src.is_dir() else src
        for variant, values in read_rmse_csv(csv_path).items():
            name = variant or (args.labels.split(",")[len(reports)] if args.labels else src.stem)
            reports.append(EvalReport(values=values, variant=name))
    emit_report(reports, args.out)
    print(f"combined {len(reports)} series into {args.out}")


def cmd_infer_hypergraph(args) -> None:
    from .plotting import plot_hypergraph

    cfg = _config(args)
    sizes = sorted({int(s) for s in args.scales.split(",") if s})
    if not sizes or sizes[0] != 2:
        raise CliError("--scales must start with the pairwise size 2, e.g. 2,3,5")
    cfg.scales = tuple(sizes[1:])
    sc = scenario_from_csv(args.scenario, cfg, args.target)
    store = ParameterStore(cfg.seed)
    if args.ckpt:
        store, manifest = load_checkpoint(args.ckpt)
        ckpt_cfg = RunConfig.from_dict(manifest["meta"]["config"])
        cfg.d_embed, cfg.hidden = ckpt_cfg.d_embed, ckpt_cfg.hidden
    enc = cfg.rhino().encoder
    states = np.transpose(data.history_features(sc.history), (1, 0, 2))
    q = embed_trajectories(store, "rhino.enc_t.fq", states, enc.d_embed, enc.hidden)
    aff = affinity(q.data)
    incidences, graphs = block_incidences([aff], [0], sc.n_agents, enc)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_affinity_csv(out / "affinity.csv", aff)
    for size, entry in zip((2,) + enc.scales, graphs[0].scales):
        write_incidence_csv(out / f"incidence_s{size}.csv", entry.hypergraph)
    pos = sc.history[-1, :, :2] + np.asarray(sc.origin)
    plot_hypergraph(pos, incidences, (2,) + enc.scales, out / "hypergraph.svg", labels=list(sc.slots))
    print(f"wrote affinity, {len(incidences)} incidence files and hypergraph.svg to {out}")


# ---- parser -------------------------------------------------------------

def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    p.add_argument("--preset", choices=("default", "desk"), default="default",
                   help="'desk' selects the small widths used for CPU-scale runs")
    p.add_argument("--seed", type=int, default=None)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="hypermotion", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="normalize an NGSIM/HighD/canonical file to canonical CSV")
    p.add_argument("input")
    p.add_argument("--format", choices=("canonical", "ngsim", "highd"), default="canonical")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("synth", help="write synthetic highway scenes")
    p.add_argument("--out", required=True)
    p.add_argument("--scenes", type=int, default=10)
    p.add_argument("--frames", type=int, default=80)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train-giraffe", help="train the multi-modal predictor")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int)
    p.add_argument("--split", choices=("train", "all"), default="train")
    p.set_defaults(func=cmd_train_giraffe)

    p = sub.add_parser("train-rhino", help="train the generator against a frozen predictor")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--giraffe-ckpt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--variant", choices=VARIANTS, default="full")
    p.add_argument("--steps", type=int)
    p.add_argument("--split", choices=("train", "all"), default="train")
    p.set_defaults(func=cmd_train_rhino)

    for name, fn, extra in (("predict", cmd_predict, False), ("generate", cmd_generate, True)):
        p = sub.add_parser(name, help="per-mode forecasts" if name == "predict" else "K sampled futures")
        p.add_argument("--ckpt", required=True)
        p.add_argument("--scenario", required=True, help="canonical CSV")
        p.add_argument("--target", type=int, help="target vehicle id (default: lowest id)")
        p.add_argument("--out", required=True)
        if extra:
            p.add_argument("--k", type=int, default=10)
            p.add_argument("--seed", type=int, default=7)
            p.add_argument("--source", choices=("posterior", "prior"), default="posterior")
        p.set_defaults(func=fn)

    p = sub.add_parser("infer-hypergraph", help="affinity, per-scale incidences and an SVG overlay")
    _common(p)
    p.add_argument("--scenario", required=True)
    p.add_argument("--scales", default="2,3,5", help="group sizes; 2 is the pairwise scale")
    p.add_argument("--ckpt", help="generator checkpoint supplying the embedding weights")
    p.add_argument("--target", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_infer_hypergraph)

    p = sub.add_parser("evaluate", help="horizon RMSE report")
    _common(p)
    p.add_argument("--samples", help="CSV from 'generate'; scored against --scenario")
    p.add_argument("--scenario")
    p.add_argument("--target", type=int)
    p.add_argument("--ckpt", help="generator checkpoint, scored on --data")
    p.add_argument("--data")
    p.add_argument("--split", choices=("train", "test", "all"), default="test")
    p.add_argument("--k", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="train and score generator variants")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--giraffe-ckpt", required=True)
    p.add_argument("--variants", default=",".join(VARIANTS))
    p.add_argument("--steps", type=int)
    p.add_argument("--eval-seed", type=int, default=7)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("report", help="merge rmse.csv files into one table and figure")
    p.add_argument("inputs", nargs="+", help="report directories or rmse.csv files")
    p.add_argument("--labels", help="comma-separated names for single-series inputs")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("show-config", help="print the resolved config")
    _common(p)
    p.set_defaults(func=lambda a: print(dump_config_text(_config(a)), end=""))
    return ap


def _check_args(args) -> None:
    if args.command == "evaluate":
        if args.samples and not args.scenario:
            raise CliError("--samples requires --scenario")
        if not args.samples and not (args.ckpt and args.data):
            raise CliError("evaluate needs either --samples/--scenario or --ckpt/--data")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        _check_args(args)
        args.func(args)
    except (CliError, ConfigFileError, CheckpointError, data.IngestError, ValueError, OSError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
