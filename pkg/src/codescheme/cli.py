"""Command-line interface.

Configuration files hold ``key = value`` lines (``#`` starts a comment).
Dotted keys nest (``distribution.kind = finite``); values are parsed as
JSON when possible and kept as strings otherwise.  Exit codes: 0 success,
2 validation error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import bounds as B
from .coding import EncodeStrategy, TrainConfig, empirical_risk, encode_batch, erm_train
from .harness import ExperimentConfig, architecture, measure_gap, rate_study, sample, stream, _initial_map
from .maps import ArchitectureSpec, map_from_dict
from .ratedistortion import RDProblem, distortion_at_rate, rd_curve, rd_lower_bound_check
from .spaces import Dataset, DataSpace, DiscreteMeasure, LatentSpace, ValidationError
from .transport import wasserstein

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERICAL = 0, 2, 3


# --------------------------------------------------------------------------
# Config and file formats
# --------------------------------------------------------------------------


def _value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def parse_config(text: str) -> dict:
    """Flat ``key = value`` text into a nested dict."""
    parser = configparser.ConfigParser(interpolation=None, comment_prefixes=("#",), inline_comment_prefixes=("#",),
                                       delimiters=("=",))
    parser.optionxform = str
    try:
        parser.read_string("[root]\n" + text)
    except configparser.Error as exc:
        raise ValidationError(f"malformed config: {exc}") from exc
    out: dict = {}
    for key, raw in parser["root"].items():
        node = out
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ValidationError(f"config key {key!r} conflicts with a scalar")
        node[parts[-1]] = _value(raw.strip())
    return out


def load_config(path) -> dict:
    if path is None:
        return {}
    try:
        return parse_config(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise ValidationError(f"cannot read config: {exc}") from exc


def _require(cfg, key):
    if key not in cfg:
        raise ValidationError(f"config key {key!r} is required")
    return cfg[key]


def _space(d) -> DataSpace:
    return DataSpace.from_dict(d)


def _latent(d) -> LatentSpace:
    return LatentSpace.from_dict(d)


def _strategy(d) -> EncodeStrategy:
    d = dict(d or {})
    return EncodeStrategy(
        d.get("kind", "exhaustive"),
        float(d.get("net_eps", 0.05)),
        int(d.get("gd_steps", 0)),
        float(d.get("step_size", 0.5)),
        int(d.get("restarts", 1)),
    )


def _train_config(d, seed) -> TrainConfig:
    d = dict(d or {})
    return TrainConfig(
        outer_iterations=int(d.get("outer_iterations", 5)),
        latent_strategy=_strategy(d.get("encode")) if "encode" in d else EncodeStrategy(),
        param_step_size=float(d.get("param_step_size", 0.5)),
        param_steps_per_outer=int(d.get("param_steps_per_outer", 5)),
        seed=seed,
    )


def _bound_list(v):
    if v is None:
        return ()
    if isinstance(v, str):
        return tuple(s.strip() for s in v.split(",") if s.strip())
    return tuple(v)


def experiment_config(cfg: dict, seed: int) -> ExperimentConfig:
    strategy = _strategy(cfg.get("encode"))
    train = dict(cfg.get("train", {}))
    train.setdefault("encode", cfg.get("encode", {}))
    family = dict(_require(cfg, "family"))
    if isinstance(family.get("map"), str):
        family["map"] = _read_json(family["map"])
    dist = dict(_require(cfg, "distribution"))
    if isinstance(dist.get("embedding"), str):
        dist["embedding"] = _read_json(dist["embedding"])
    return ExperimentConfig(
        distribution=dist,
        space=_space(_require(cfg, "space")),
        latent=_latent(cfg.get("latent", {"kind": "ball", "dimension": 1})),
        family=family,
        n_train=int(cfg.get("n_train", 100)),
        n_test=int(cfg.get("n_test", 10_000)),
        replications=int(cfg.get("replications", 10)),
        seed=seed,
        strategy=strategy,
        train=_train_config(train, seed),
        bounds=_bound_list(cfg.get("bounds")),
        delta=float(cfg.get("delta", 0.05)),
        exact_population=bool(cfg.get("exact_population", False)),
    )


def _read_json(path):
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ValidationError(f"cannot read JSON {path}: {exc}") from exc


def read_points(path):
    """Points from a CSV file, one per row.

    A header row is optional; if present, a column named ``weight`` holds
    atom weights.  Returns ``(points, weights or None)``.
    """
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = [r for r in csv.reader(fh) if r]
    except OSError as exc:
        raise ValidationError(f"cannot read {path}: {exc}") from exc
    header = None
    if rows:
        try:
            [float(x) for x in rows[0]]
        except ValueError:
            header, rows = [h.strip() for h in rows[0]], rows[1:]
    if not rows:
        raise ValidationError(f"{path}: no data rows")
    try:
        data = np.array([[float(x) for x in r] for r in rows], dtype=np.float64)
    except ValueError as exc:
        raise ValidationError(f"{path}: non-numeric or ragged rows ({exc})") from exc
    if header is not None and len(header) != data.shape[1]:
        raise ValidationError(f"{path}: header and rows disagree in width")
    if header is not None and "weight" in header:
        j = header.index("weight")
        return np.delete(data, j, axis=1), data[:, j]
    return data, None


def read_space(path) -> DataSpace:
    """A ``.space`` sidecar: ``kind = ball|box`` plus ``center``/``radius`` or ``lower``/``upper``."""
    return _space(load_config(path))


def read_dataset(path, space: DataSpace | None = None) -> Dataset:
    """Points from ``path``; the space comes from the ``path + '.space'`` sidecar when present."""
    pts, _ = read_points(path)
    side = Path(str(path) + ".space")
    if side.exists():
        space = read_space(side)
    if space is None:
        raise ValidationError(f"no data space: add {side.name} or a space.* config section")
    return Dataset(pts, space)


def _fmt(x):
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def write_csv(path: Path, rows, columns=None):
    columns = columns or (list(rows[0].keys()) if rows else [])
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r.get(c, "")) for c in columns])


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, (np.floating, float)):
        x = float(x)
        return x if math.isfinite(x) else None
    if isinstance(x, np.integer):
        return int(x)
    return x


def write_json(path: Path, obj):
    path.write_text(json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def write_dataset(path: Path, data: Dataset):
    """Headerless CSV plus its ``.space`` sidecar."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        for p in data.samples:
            w.writerow([_fmt(v) for v in p])
    lines = [f"{k} = {json.dumps(_jsonable(v))}" for k, v in data.space.to_dict().items()]
    Path(str(path) + ".space").write_text("\n".join(lines) + "\n", encoding="utf-8")


# --------------------------------------------------------------------------
# Verbs
# --------------------------------------------------------------------------


def _dataset_or_sample(cfg, args, key="data"):
    space = _space(cfg["space"]) if "space" in cfg else None
    if key in cfg:
        return read_dataset(cfg[key], space)
    exp = experiment_config(cfg, args.seed)
    return sample(exp, exp.n_train, (0, "train"))


def cmd_fit(cfg, args, out: Path):
    data = _dataset_or_sample(cfg, args)
    latent = _latent(cfg.get("latent", {"kind": "ball", "dimension": 1}))
    fam = dict(_require(cfg, "family"))
    if fam.get("kind", "dense") != "dense":
        raise ValidationError("fit trains dense families; use vq/pca through the gap verb")
    exp = ExperimentConfig({"kind": "uniform-box"}, data.space, latent, {"kind": "dense", **fam}, seed=args.seed)
    template = _initial_map(exp, stream(exp, 0, "init"))
    tc = _train_config({**cfg.get("train", {}), "encode": cfg.get("encode", {})}, args.seed)
    fmap, trace = erm_train(template, data, latent, tc)
    write_json(out / "map.json", fmap.to_dict())
    write_json(out / "fit.json", {"risk_trace": trace, "final_risk": trace[-1], "n": len(data),
                                  "architecture": ArchitectureSpec.from_map(fmap, latent, data.space).to_dict()})
    write_csv(out / "trace.csv", [{"iteration": i, "risk": r} for i, r in enumerate(trace)], ["iteration", "risk"])
    write_dataset(out / "train.csv", data)


def _map_latent(cfg):
    fmap = map_from_dict(_read_json(_require(cfg, "map")))
    latent = _latent(_require(cfg, "latent"))
    return fmap, latent


def cmd_encode(cfg, args, out):
    fmap, latent = _map_latent(cfg)
    data = read_dataset(_require(cfg, "data"), _space(cfg["space"]) if "space" in cfg else None)
    h, err = encode_batch(data.samples, fmap, data.space, latent, _strategy(cfg.get("encode")))
    cols = [f"h{j}" for j in range(h.shape[1])] + ["error"]
    rows = [{**{f"h{j}": v for j, v in enumerate(hi)}, "error": e} for hi, e in zip(h, err)]
    write_csv(out / "encoded.csv", rows, cols)


def cmd_risk(cfg, args, out):
    fmap, latent = _map_latent(cfg)
    data = read_dataset(_require(cfg, "data"), _space(cfg["space"]) if "space" in cfg else None)
    risk = empirical_risk(fmap, data, latent, _strategy(cfg.get("encode")))
    write_json(out / "risk.json", {"risk": risk, "n": len(data)})


def cmd_gap(cfg, args, out):
    exp = experiment_config(cfg, args.seed)
    records = measure_gap(exp, args.threads)
    write_csv(out / "gap.csv", [r.row(exp.bounds) for r in records])
    ok = [r for r in records if not r.failed]
    summary = {
        "replications": exp.replications,
        "failed": len(records) - len(ok),
        "median_gap": float(np.median([r.gap for r in ok])) if ok else None,
        "max_gap": max((r.gap for r in ok), default=None),
        "bounds": records[0].bounds if records else {},
        "n_train": exp.n_train,
        "n_test": 0 if exp.exact_population else exp.n_test,
        "exact_population": exp.exact_population,
        "seed": exp.seed,
    }
    write_json(out / "gap.json", summary)


def cmd_rate(cfg, args, out):
    exp = experiment_config(cfg, args.seed)
    grid = _require(cfg, "n_grid")
    study = rate_study(exp, grid, args.threads)
    write_csv(out / "rate.csv", study.rows())
    write_json(out / "rate.json", {"n_grid": study.n_grid, "slope": study.slope if study.slope_defined else None,
                                   "intercept": study.intercept if study.slope_defined else None,
                                   "slope_defined": study.slope_defined})


def cmd_bound(cfg, args, out):
    n, delta = int(_require(cfg, "n")), float(cfg.get("delta", 0.05))
    if "architecture" in cfg:
        arch = cfg["architecture"]
        spec = ArchitectureSpec.from_dict(_read_json(arch) if isinstance(arch, str) else arch)
    else:
        exp = experiment_config(cfg, args.seed)
        spec = architecture(exp)
        if spec is None:
            raise ValidationError("bound needs an architecture")
    reports = B.applicable_bounds(spec, n, delta)
    if not reports:
        raise ValidationError("no bound applies to this architecture")
    write_json(out / "bounds.json", {"architecture": spec.to_dict(), "reports": [r.to_dict() for r in reports]})


def read_measure(path) -> DiscreteMeasure:
    """Weighted atoms: coordinates then a last weight column (or a ``weight`` header column)."""
    pts, w = read_points(path)
    if w is None:
        if pts.shape[1] < 2:
            raise ValidationError(f"{path}: need coordinate columns and a weight column")
        pts, w = pts[:, :-1], pts[:, -1]
    return DiscreteMeasure(pts, w)


def cmd_wasserstein(cfg, args, out):
    p = int(cfg.get("p", 2))
    P, Q = read_measure(_require(cfg, "source")), read_measure(_require(cfg, "target"))
    dist, coupling = wasserstein(P, Q, p)
    rows = [{"source": i, "target": j, "mass": coupling.flow[i, j]} for i, j in zip(*np.nonzero(coupling.flow))]
    write_csv(out / "coupling.csv", rows, ["source", "target", "mass"])
    write_json(out / "wasserstein.json", {"p": p, "distance": dist, "cost": dist**p, "coupling_nnz": coupling.nnz,
                                          "marginal_residual": coupling.marginal_residual(P.weights, Q.weights)})


def cmd_rd(cfg, args, out):
    if "source" in cfg:
        P, space = read_measure(cfg["source"]), _space(cfg["space"]) if "space" in cfg else None
    else:
        data = read_dataset(_require(cfg, "data"), _space(cfg["space"]) if "space" in cfg else None)
        P, space = data.empirical(), data.space
    checked = False
    if "map" in cfg and _latent(_require(cfg, "latent")).kind == "finite":
        if space is None:
            raise ValidationError("the finite-code check needs a data space")
        fmap, latent = _map_latent(cfg)
        checked = True
        rep = rd_lower_bound_check(P, fmap, space, latent, int(cfg.get("grid_resolution", 0)))
        write_json(out / "rd_check.json", {"risk": rep.risk, "distortion_lower": rep.distortion,
                                           "distortion_upper": rep.distortion_upper, "rate_nats": rep.rate_target,
                                           "alphabet_size": rep.alphabet_size, "holds": rep.holds})
    alphabet = cfg.get("alphabet")
    if alphabet is None:
        alphabet = P.atoms
    elif isinstance(alphabet, str):
        alphabet = read_points(alphabet)[0]
    problem = RDProblem(P, np.atleast_2d(np.asarray(alphabet, dtype=np.float64)))
    rows = []
    if "slopes" in cfg:
        curve = rd_curve(problem, cfg["slopes"])
        rows += [{"rate_nats": r, "distortion": d, "distortion_upper": d, "slope": s}
                 for r, d, s in zip(curve.rates, curve.distortions, curve.slopes)]
    for rate in cfg.get("rates", []):
        t = distortion_at_rate(problem, float(rate))
        rows.append({"rate_nats": float(rate), "distortion": t.lower, "distortion_upper": t.upper, "slope": math.nan})
    if not rows and not checked:
        raise ValidationError("rd needs slopes, rates, or a map with a finite latent space")
    if rows:
        write_csv(out / "rd.csv", rows, ["rate_nats", "distortion", "distortion_upper", "slope"])


def cmd_cover(cfg, args, out):
    M, d, k = float(_require(cfg, "M")), int(_require(cfg, "d")), int(_require(cfg, "k"))
    eps = _require(cfg, "eps")
    eps = eps if isinstance(eps, list) else [eps]
    env = B.CoveringFunction.maurey(M, d, k)
    rows = [{"eps": float(e), "logN": B.maurey_logcover(M, d, k, float(e)), "logN_monotone": env(float(e))} for e in eps]
    write_csv(out / "cover.csv", rows, ["eps", "logN", "logN_monotone"])


VERBS = {
    "fit": (cmd_fit, "train a dense reconstruction map by alternating minimisation"),
    "encode": (cmd_encode, "encode a CSV of points with a saved map"),
    "risk": (cmd_risk, "empirical risk of a saved map on a dataset"),
    "gap": (cmd_gap, "measure train/test generalization gaps"),
    "rate": (cmd_rate, "median gap versus training size, with log-log slope"),
    "bound": (cmd_bound, "evaluate every applicable network bound"),
    "wasserstein": (cmd_wasserstein, "exact W_p between two weighted point sets"),
    "rd": (cmd_rd, "rate-distortion curve, targets and the finite-code check"),
    "cover": (cmd_cover, "Maurey covering numbers"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="codescheme", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="verb", required=True)
    for name, (_, help_) in VERBS.items():
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="key = value configuration file")
        p.add_argument("--seed", type=int, default=None, help="master seed (overrides the config)")
        p.add_argument("--out", default=".", help="output directory")
        p.add_argument("--threads", type=int, default=1, help="worker threads for replications")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.seed is None:
            args.seed = int(cfg.get("seed", 0))
        if args.seed < 0 or args.seed >= 2**64:
            raise ValidationError("seed must be an unsigned 64-bit integer")
        if args.threads < 1:
            raise ValidationError("threads must be at least 1")
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        VERBS[args.verb][0](cfg, args, out)
    except (ValidationError, ValueError, KeyError, TypeError) as exc:
        # malformed config values surface as KeyError/TypeError/ValueError
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (ArithmeticError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
