"""Command-line pipeline: synthetic data through force fields, therapist models and streaming.

Every subcommand reads and writes under one work directory and leaves a
manifest (config hash, input hashes, package versions) in ``manifests/``.
Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import logging
import platform
import sys
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import __version__
from . import field as ff
from . import gmm as gm
from . import realtime as rt
from . import strides as sp
from . import synth
from . import therapist as th
from . import vae

log = logging.getLogger("gaitdyad")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class ConfigError(ValueError):
    pass


class MissingArtifact(FileNotFoundError):
    def __init__(self, path, producer):
        super().__init__(f"missing {path}; run `gaitdyad {producer}` first")


# --- configuration -------------------------------------------------------------------


@dataclass
class SynthSection:
    n_dyads: int = 8
    duration: float = 60.0
    kind: str = "coupled"  # or "lagged"
    k_p: float = 20.0
    k_t: float = 20.0
    b_p: float = 1.0
    b_t: float = 1.0
    noise_deg: float = 0.3


@dataclass
class PreprocessSection:
    percentile: float = 90.0
    train_fraction: float = 0.7


@dataclass
class VaeSection:
    epochs: int = 1000
    batch_size: int = 256
    lr: float = 1e-3
    patience: int = 20
    beta: dict = dataclasses.field(default_factory=lambda: {"hip": 1e-3, "knee": 1e-3})


@dataclass
class FieldSection:
    K: int = 10
    resolution: int = 25
    pooled: bool = True
    tol: float = 1e-7
    max_iter: int = 500


@dataclass
class StSection:
    epochs: int = 150
    batch_size: int = 256
    lr: float = 1e-5
    hidden: int = 64


@dataclass
class LooSection:
    enabled: bool = True


@dataclass
class RunConfig:
    seed: int = 0
    workdir: str = "run"
    synth: SynthSection = dataclasses.field(default_factory=SynthSection)
    preprocess: PreprocessSection = dataclasses.field(default_factory=PreprocessSection)
    vae: VaeSection = dataclasses.field(default_factory=VaeSection)
    field: FieldSection = dataclasses.field(default_factory=FieldSection)
    st: StSection = dataclasses.field(default_factory=StSection)
    loo: LooSection = dataclasses.field(default_factory=LooSection)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return _build(cls, d, "")

    def digest(self):
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


def _build(cls, d, where):
    if not isinstance(d, dict):
        raise ConfigError(f"{where or 'config'}: expected an object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(d) - set(fields))
    if unknown:
        raise ConfigError(f"unknown config key(s) {', '.join(where + k for k in unknown)}")
    kw = {}
    for name, value in d.items():
        default = fields[name].default_factory() if fields[name].default_factory is not dataclasses.MISSING else None
        if dataclasses.is_dataclass(default):
            kw[name] = _build(type(default), value, f"{where}{name}.")
        else:
            kw[name] = value
    return cls(**kw)


def load_config(path=None, overrides=()):
    """Config from an optional JSON file, then ``section.key=value`` overrides (values parsed as JSON)."""
    d = RunConfig().to_dict()
    if path:
        try:
            loaded = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file {path} not found") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        RunConfig.from_dict(loaded)  # reject unknown keys before merging
        _merge(d, loaded)
    for item in overrides:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ConfigError(f"override {item!r} is not key=value")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = d
        parts = key.split(".")
        for p in parts[:-1]:
            if not isinstance(node.get(p), dict):
                raise ConfigError(f"unknown config key {key}")
            node = node[p]
        if parts[-1] not in node:
            raise ConfigError(f"unknown config key {key}")
        node[parts[-1]] = value
    return RunConfig.from_dict(d)


def _merge(dst, src):
    for k, v in src.items():
        if isinstance(v, dict) and isinstance(dst.get(k), dict) and k != "beta":
            _merge(dst[k], v)
        else:
            dst[k] = v


# --- work directory ------------------------------------------------------------------------


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _versions():
    import scipy
    import sklearn

    return {"gaitdyad": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__, "scikit-learn": sklearn.__version__}


class Workdir:
    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.root = Path(cfg.workdir)
        self.inputs = []

    def path(self, *parts):
        return self.root.joinpath(*parts)

    def need(self, rel, producer):
        p = self.path(rel)
        if not p.exists():
            raise MissingArtifact(p, producer)
        return p

    def read(self, rel, producer):
        p = self.need(rel, producer)
        self.inputs.append(p)
        return p

    def out(self, *parts):
        p = self.path(*parts)
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def manifest(self, command, outputs, extra=None):
        doc = {
            "command": command,
            "config": self.cfg.to_dict(),
            "config_sha256": self.cfg.digest(),
            "inputs": {str(p.relative_to(self.root)): _sha256(p) for p in sorted(set(self.inputs)) if p.is_file()},
            "outputs": {str(Path(p).relative_to(self.root)): _sha256(p) for p in sorted(map(Path, outputs)) if Path(p).is_file()},
            "versions": _versions(),
            **(extra or {}),
        }
        self.out("manifests", f"{command}.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")

    def dyad_paths(self):
        paths = sorted(self.path("data").glob("dyad_*.csv")) if self.path("data").exists() else []
        if not paths:
            raise MissingArtifact(self.path("data", "dyad_*.csv"), "synth-data")
        self.inputs += paths + [p.with_suffix(".json") for p in paths]
        return paths


def _dyads(wd):
    return [synth.DyadRecording.read(p) for p in wd.dyad_paths()]


def _strides(wd):
    strides = sp.read_strides(wd.read("strides/strides.csv", "preprocess"))
    split = json.loads(wd.read("strides/split.json", "preprocess").read_text())
    pairs = sp.pair_strides([s for s in strides if s.owner == "patient"], [s for s in strides if s.owner == "therapist"])
    return sp.StrideDataset(pairs), split


def _vae_models(wd):
    return {j: vae.load_vae(wd.read(f"models/vae_{j}.dyfw", "train-vae")) for j in sp.JOINT_NAMES}


def _field_keys(wd):
    index = json.loads(wd.read("fields/index.json", "fit-field").read_text())
    return index["fields"]


# --- subcommands -----------------------------------------------------------------------------


def cmd_synth_data(cfg: RunConfig, args):
    wd = Workdir(cfg)
    sc = cfg.synth
    if sc.kind not in ("coupled", "lagged"):
        raise ConfigError("synth.kind must be 'coupled' or 'lagged'")
    profiles = synth.patient_cohort(sc.n_dyads, seed=cfg.seed)
    params = synth.CouplingParams(sc.k_p, sc.k_t, sc.b_p, sc.b_t)
    outputs = []
    for i, prof in enumerate(profiles):
        prof.noise_deg = sc.noise_deg
        seed = cfg.seed * 1000 + i
        if sc.kind == "coupled":
            rec = synth.couple_dyad(prof, synth.GaitProfile(noise_deg=sc.noise_deg), params, sc.duration, seed=seed, dyad_id=i)
        else:
            rec = synth.lagged_dyad(prof, sc.duration, seed=seed, params=params, dyad_id=i)
        p = wd.out("data", f"dyad_{i:02d}.csv")
        rec.write(p)
        outputs += [p, p.with_suffix(".json")]
    wd.manifest("synth-data", outputs)
    print(f"wrote {sc.n_dyads} dyads to {wd.path('data')}")


def cmd_preprocess(cfg: RunConfig, args):
    wd = Workdir(cfg)
    ds = sp.build_stride_dataset(_dyads(wd), percentile=cfg.preprocess.percentile)
    if len(ds.pairs) < 10:
        raise sp.InsufficientStridesError(f"only {len(ds.pairs)} stride pairs after screening")
    f = cfg.preprocess.train_fraction
    train, val = sp.split(len(ds.pairs), (f, 1.0 - f), seed=cfg.seed)
    p_str = wd.out("strides", "strides.csv")
    sp.write_strides(p_str, ds.strides())
    p_split = wd.out("strides", "split.json")
    p_split.write_text(json.dumps({"train": train.tolist(), "val": val.tolist(), "unit": "pair"}) + "\n")
    summary = {"pairs": len(ds.pairs), "discarded_duration": ds.discarded_duration,
               "removed_outliers": ds.removed_outliers, **ds.meta}
    wd.manifest("preprocess", [p_str, p_split], {"summary": summary})
    print(f"{len(ds.pairs)} stride pairs ({ds.removed_outliers} outliers, {ds.discarded_duration} bad durations removed)")


def _joint_strides(ds, idx, j):
    pairs = [ds.pairs[i] for i in idx]
    return np.array([s.values[j] for pr in pairs for s in (pr.patient, pr.therapist)])


def cmd_train_vae(cfg: RunConfig, args):
    wd = Workdir(cfg)
    ds, split = _strides(wd)
    vc = cfg.vae
    outputs = []
    summary = {}
    for j, joint in enumerate(sp.JOINT_NAMES):
        if joint not in vc.beta:
            raise ConfigError(f"vae.beta has no entry for {joint}")
        tc = vae.TrainConfig(vc.epochs, vc.batch_size, vc.lr, vc.patience, float(vc.beta[joint]), cfg.seed)
        tr, va = _joint_strides(ds, split["train"], j), _joint_strides(ds, split["val"], j)
        stats = sp.fit_stats(tr, pooled_std=True)
        res = vae.train_vae(sp.normalize(tr, stats), sp.normalize(va, stats), tc, joint=joint, stats=stats)
        mean, std, _ = vae.reconstruction_rmse(res.model, va)
        p = wd.out("models", f"vae_{joint}.dyfw")
        vae.save_vae(p, res.model, tc, {"best_epoch": res.best_epoch})
        pc = wd.out("models", f"vae_{joint}_curves.csv")
        vae.write_curves(pc, res.curves)
        outputs += [p, pc]
        summary[joint] = {"val_rmse_deg": [mean, std], "best_epoch": res.best_epoch, "stopped_early": res.stopped_early}
        print(f"{joint}: val rMSE {mean:.3f} +/- {std:.3f} deg (best epoch {res.best_epoch})")
    wd.manifest("train-vae", outputs, {"summary": summary})


def cmd_fit_field(cfg: RunConfig, args):
    wd = Workdir(cfg)
    ds, _ = _strides(wd)
    models = _vae_models(wd)
    fc = cfg.field
    gcfg = gm.GmmConfig(tol=fc.tol, max_iter=fc.max_iter, seed=cfg.seed)
    fields = ff.fit_fields(ds, models, fc.K, gcfg, fc.resolution, pooled=fc.pooled)
    outputs = []
    index = []
    for key, fld in sorted(fields.items(), key=lambda kv: tuple(map(str, kv[0]))):
        name = "_".join(map(str, key))
        p = wd.out("fields", f"{name}.gmm.json")
        p.write_text(json.dumps({"gmm": fld.gmm.to_dict(), "bounds": fld.bounds.tolist(), "joint": fld.joint,
                                 "role": fld.role, "resolution": fld.resolution}, indent=2, sort_keys=True) + "\n")
        outputs.append(p)
        index.append(name)
        ll = fld.gmm.ll_trace[-1]
        print(f"{name}: K={fld.gmm.K} mean loglik {ll:.3f} ({len(fld.gmm.ll_trace)} EM iterations)")
    pi = wd.out("fields", "index.json")
    pi.write_text(json.dumps({"fields": index}, indent=2) + "\n")
    wd.manifest("fit-field", outputs + [pi])


def cmd_export_field(cfg: RunConfig, args):
    wd = Workdir(cfg)
    models = _vae_models(wd)
    outputs = []
    for name in _field_keys(wd):
        d = json.loads(wd.read(f"fields/{name}.gmm.json", "fit-field").read_text())
        mix = gm.GmmModel.from_dict(d["gmm"])
        fld = ff.build_field(mix, models[d["joint"]], np.array(d["bounds"]), d["resolution"], d["role"])
        p = wd.out("fields", f"{name}.csv")
        fld.write(p)
        outputs += [p, p.with_suffix(".json")]
    wd.manifest("export-field", outputs)
    print(f"exported {len(outputs) // 2} fields to {wd.path('fields')}")


def _st_config(cfg):
    s = cfg.st
    return th.StConfig(s.epochs, s.batch_size, s.lr, s.hidden, cfg.seed)


def cmd_train_st(cfg: RunConfig, args):
    wd = Workdir(cfg)
    recs = _dyads(wd)
    model, hist, test = th.pooled_run(recs, _st_config(cfg))
    ev = th.evaluate_rmse(model, test)
    out = wd.path("models", "st")
    th.save_model(out, model, _st_config(cfg), {"best_epoch": hist.best_epoch.tolist()})
    pv = wd.out("models", "st_val_rmse.csv")
    with pv.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", *th.FEATURES])
        for e, row in enumerate(hist.val_rmse, 1):
            w.writerow([e, *(repr(float(v)) for v in row)])
    wd.manifest("train-st", sorted(out.iterdir()) + [pv], {"summary": ev})
    print(f"pooled test position rMSE {ev['position_mean']:.3f} deg, velocity {ev['velocity_mean']:.3f} deg/s")


def cmd_eval_loo(cfg: RunConfig, args):
    wd = Workdir(cfg)
    if not cfg.loo.enabled:
        print("leave-one-out disabled in config")
        return
    recs = _dyads(wd)
    rows, _ = th.leave_one_out(recs, _st_config(cfg), progress=lambda r: print(f"{r.label}: {r.position_mean:.3f} deg"))
    p = wd.out("loo.csv")
    th.write_loo(p, rows)
    wd.manifest("eval-loo", [p])


def _load_st(path):
    p = Path(path)
    if not (p / "manifest.json").exists():
        raise MissingArtifact(p / "manifest.json", "train-st")
    return th.load_model(p)


def cmd_serve(cfg: RunConfig, args):
    model = _load_st(args.model)
    src = rt.open_input(args.input)
    sink = rt.open_output(args.output)
    try:
        stats = rt.serve(src, sink, model, rate=args.rate, horizon=args.horizon, paced=not args.lockstep,
                         text_in=args.text, text_out=args.text, ingest_rate=args.ingest_rate)
    finally:
        src.close()
        if sink is not sys.stdout.buffer:
            sink.close()
        else:
            sink.flush()
    _report_stats(stats, args.stats_json)


def cmd_bench_latency(cfg: RunConfig, args):
    if args.model:
        model = _load_st(args.model)
    else:
        unit = th.FeatureStats(np.zeros(8), np.ones(8), np.zeros(8), np.ones(8))
        model = th.StModel(hidden=args.hidden, seed=cfg.seed, stats=unit)
    stats = rt.bench_latency(model, args.trials, args.warmup, cfg.seed)
    _report_stats(stats, args.stats_json)


def _report_stats(stats, path):
    text = json.dumps(stats.to_dict(), indent=2, sort_keys=True)
    if path:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text + "\n")
    print(f"n={stats.n} mean={stats.mean_ms:.3f} ms p99={stats.p99_ms:.3f} ms overruns={stats.overruns}", file=sys.stderr)


def cmd_report(cfg: RunConfig, args):
    wd = Workdir(cfg)
    lines = [f"# Run report: {wd.root}", ""]
    man = wd.path("manifests", "train-vae.json")
    if man.exists():
        summary = json.loads(man.read_text()).get("summary", {})
        lines += ["## Stride VAE", "", "| joint | val rMSE (deg) | best epoch |", "|---|---|---|"]
        for j, s in summary.items():
            lines.append(f"| {j} | {s['val_rmse_deg'][0]:.3f} +/- {s['val_rmse_deg'][1]:.3f} | {s['best_epoch']} |")
        lines.append("")
    idx = wd.path("fields", "index.json")
    if idx.exists():
        lines += ["## Force fields", "", "| field | K | EM iterations | final mean loglik |", "|---|---|---|---|"]
        for name in json.loads(idx.read_text())["fields"]:
            g = json.loads(wd.path("fields", f"{name}.gmm.json").read_text())["gmm"]
            lines.append(f"| {name} | {len(g['weights'])} | {len(g['ll_trace'])} | {g['ll_trace'][-1]:.4f} |")
        lines.append("")
    loo = wd.path("loo.csv")
    if loo.exists():
        with loo.open() as fh:
            rows = list(csv.reader(fh))
        lines += ["## Synthetic therapist (leave-one-out)", "", "| " + " | ".join(rows[0]) + " |",
                  "|" + "---|" * len(rows[0])]
        lines += ["| " + " | ".join(r) + " |" for r in rows[1:]]
        lines.append("")
    lat = wd.path("latency.json")
    if lat.exists():
        s = json.loads(lat.read_text())
        lines += ["## Latency", "", "| n | mean ms | p50 ms | p95 ms | p99 ms | max ms | overruns |",
                  "|---|---|---|---|---|---|---|",
                  f"| {s['n']} | {s['mean_ms']:.3f} | {s['p50_ms']:.3f} | {s['p95_ms']:.3f} | {s['p99_ms']:.3f} | "
                  f"{s['max_ms']:.3f} | {s['overruns']} |", ""]
    if len(lines) == 2:
        raise MissingArtifact(wd.root / "manifests", "synth-data")
    out = args.output or wd.out("report.md")
    Path(out).write_text("\n".join(lines))
    print(f"wrote {out}")


COMMANDS = {
    "synth-data": (cmd_synth_data, "generate synthetic dyad recordings"),
    "preprocess": (cmd_preprocess, "segment, screen and split strides"),
    "train-vae": (cmd_train_vae, "train hip and knee stride VAEs"),
    "fit-field": (cmd_fit_field, "fit latent force mixtures"),
    "export-field": (cmd_export_field, "write force fields on a latent grid as CSV"),
    "train-st": (cmd_train_st, "train the pooled synthetic therapist"),
    "eval-loo": (cmd_eval_loo, "leave-one-dyad-out evaluation"),
    "serve": (cmd_serve, "stream frames through a trained therapist model"),
    "bench-latency": (cmd_bench_latency, "time single-window inference"),
    "report": (cmd_report, "summarise a run directory as Markdown"),
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser():
    parser = _Parser(prog="gaitdyad", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, (_, help_) in COMMANDS.items():
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="JSON run config")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
        p.add_argument("--workdir", help="override config workdir")
        p.add_argument("--seed", type=int, help="override config seed")
        p.add_argument("-v", "--verbose", action="store_true")
        if name == "serve":
            p.add_argument("--model", required=True, help="synthetic therapist model directory")
            p.add_argument("--input", required=True, help="frame file or tcp://host:port")
            p.add_argument("--output", default="-", help="output file (default stdout)")
            p.add_argument("--rate", type=float, default=rt.DEFAULT_RATE)
            p.add_argument("--ingest-rate", type=float, help="replay rate for file input (default --rate)")
            p.add_argument("--horizon", type=int, default=th.HORIZON_NOW, help="prediction row to emit")
            p.add_argument("--lockstep", action="store_true", help="predict after every frame, unpaced")
            p.add_argument("--text", action="store_true", help="CSV frames instead of binary")
            p.add_argument("--stats-json", help="write latency stats here")
        elif name == "bench-latency":
            p.add_argument("--model", help="model directory (default: untrained model)")
            p.add_argument("--hidden", type=int, default=64)
            p.add_argument("--trials", type=int, default=1000)
            p.add_argument("--warmup", type=int, default=100)
            p.add_argument("--stats-json", help="write latency stats here")
        elif name == "report":
            p.add_argument("--output", help="Markdown path (default WORKDIR/report.md)")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        overrides = list(args.set)
        if args.workdir:
            overrides.append(f"workdir={json.dumps(args.workdir)}")
        if args.seed is not None:
            overrides.append(f"seed={args.seed}")
        cfg = load_config(args.config, overrides)
        COMMANDS[args.command][0](cfg, args)
    except ConfigError as exc:
        print(f"gaitdyad: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"gaitdyad: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, ValueError, KeyError, rt.InsufficientData) as exc:
        print(f"gaitdyad: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
