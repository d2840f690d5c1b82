"""Command-line pipeline.  Each subcommand reads upstream artifacts from
``<out-dir>/<stage>/`` and writes its own outputs plus a ``run.json``."""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import os
import platform
import sys
import time
import traceback
from pathlib import Path

import numpy as np

from archsim import __version__

log = logging.getLogger("archsim")

EXIT_CONFIG, EXIT_MISSING, EXIT_SCHEMA, EXIT_INTERNAL = 2, 3, 4, 1


class MissingArtifact(FileNotFoundError):
    pass


class SchemaMismatch(ValueError):
    pass


# ---------------------------------------------------------------- helpers


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, default=_jsonable) + "\n"


def _jsonable(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, tuple):
        return list(o)
    raise TypeError(f"not serializable: {type(o)}")


def _clean(obj):
    """Round floats and replace non-finite values so JSON output is stable and valid."""
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return round(v, 10) if math.isfinite(v) else None
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def _write(path: Path, text: str) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    return path


def _csv(rows, header) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise MissingArtifact(f"missing {what}: {path}")
    return path


def _stage(args, name: str) -> Path:
    return Path(args.out_dir) / name


def _upstream(args, flag_value, stage: str, filename: str, what: str) -> Path:
    p = Path(flag_value) if flag_value else _stage(args, stage) / filename
    return _require(p, what)


def _svg_heatmap(names, matrix, size_cell: int = 18) -> str:
    m = np.asarray(matrix, float)
    finite = m[np.isfinite(m)]
    lo, hi = (float(finite.min()), float(finite.max())) if finite.size else (0.0, 1.0)
    span = hi - lo or 1.0
    n = len(names)
    pad = 90
    cells = []
    for i in range(n):
        for j in range(n):
            v = m[i, j]
            shade = 255 if not np.isfinite(v) else int(255 * (1 - (v - lo) / span))
            cells.append(f'<rect x="{pad + j * size_cell}" y="{pad + i * size_cell}" width="{size_cell}" '
                         f'height="{size_cell}" fill="rgb({shade},{shade},255)"/>')
    labels = "".join(f'<text x="{pad - 4}" y="{pad + i * size_cell + 13}" font-size="10" text-anchor="end">'
                     f'{nm}</text>' for i, nm in enumerate(names))
    size = pad + n * size_cell + 10
    return (f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}">'
            f'<rect width="100%" height="100%" fill="white"/>{"".join(cells)}{labels}</svg>\n')


# ---------------------------------------------------------------- zoo access


def _load_zoo(args):
    from archsim.nn.io import load_model
    from archsim.zoo import ZooManifest

    zdir = Path(args.zoo) if getattr(args, "zoo", None) else _stage(args, "train-zoo")
    report = json.loads(_require(zdir / "zoo.json", "zoo report (run train-zoo first)").read_text())
    if report.get("format") != "archsim-zoo-build/1":
        raise SchemaMismatch(f"{zdir / 'zoo.json'}: unexpected format {report.get('format')!r}")
    manifest = ZooManifest.load(_require(zdir / "manifest.json", "zoo manifest"))
    models = [load_model(_require(zdir / "models" / f"{n}.json", f"model {n}")) for n in report["members"]]
    return manifest, models


def _sat_config(args):
    from archsim.attacks import AttackConfig
    from archsim.sat import SatConfig

    acfg = AttackConfig(method=args.method, epsilon=args.epsilon, step_size=args.step_size,
                        iterations=args.iterations, momentum_decay=args.momentum_decay, seed=args.seed)
    return SatConfig(epsilon_floor=args.epsilon_floor, eval_fraction=args.eval_fraction, attack=acfg,
                     seed=args.seed)


# ---------------------------------------------------------------- subcommands


def cmd_train_zoo(args) -> dict:
    from archsim.nn.io import save_model
    from archsim.zoo import ZooManifest, build_zoo, default_manifest

    out = _stage(args, "train-zoo")
    if args.manifest:
        manifest = ZooManifest.load(_require(Path(args.manifest), "zoo manifest"))
    else:
        manifest = default_manifest(per_class=args.per_class, seed=args.seed)
    if args.accuracy_floor is not None:
        manifest.accuracy_floor = args.accuracy_floor
    cache = Path(args.cache_dir) if args.cache_dir else out / "cache"
    build = build_zoo(manifest, cache, workers=args.threads)
    out.mkdir(parents=True, exist_ok=True)
    manifest.save(out / "manifest.json")
    for m in build.models:
        save_model(m, out / "models" / m.name)
    report = {"format": "archsim-zoo-build/1", **build.report(),
              "families": manifest.families(), "accuracy-floor": manifest.accuracy_floor,
              "accuracy-band": manifest.accuracy_band}
    _write(out / "zoo.json", _dump(_clean(report)))
    return {"members": len(build.models), "excluded": build.excluded}


def cmd_attack(args) -> dict:
    from archsim.sat import eval_subset

    manifest, models = _load_zoo(args)
    cfg = _sat_config(args)
    data = eval_subset(manifest.load_dataset(), cfg)
    by_name = {m.name: m for m in models}
    names = args.models or [m.name for m in models]
    out = _stage(args, "attack")
    from archsim.attacks import attack
    from archsim.resize import to_resolution

    rates = {}
    for n in names:
        if n not in by_name:
            raise ValueError(f"unknown model {n!r}")
        m = by_name[n]
        x = to_resolution(data.images, m.spec.input_resolution)
        adv = attack(m, x, data.labels, cfg.attack, example_ids=np.arange(len(data)))
        adv.save(out / n)
        rates[n] = float(adv.fooled_source.mean())
    _write(out / "attack.json", _dump(_clean({"self-success": rates, "config": cfg.attack.to_dict()})))
    return {"attacked": names}


def cmd_sat_matrix(args) -> dict:
    from archsim.sat import eval_subset, one_sided_matrix, probe_zoo, sat_matrix

    manifest, models = _load_zoo(args)
    cfg = _sat_config(args)
    data = eval_subset(manifest.load_dataset(), cfg)
    probe = probe_zoo(models, data, cfg.attack) if len(models) >= 2 else None
    sm = sat_matrix(models, data, cfg, subsample=False, probe=probe)
    out = _stage(args, "sat-matrix")
    out.mkdir(parents=True, exist_ok=True)
    sm.save(out / "sat.csv")
    if args.one_sided:
        osm = one_sided_matrix(models, data, cfg, subsample=False, probe=probe)
        _write(out / "one-sided.csv", _csv([[n, *(f"{v:.6f}" for v in row)] for n, row in zip(sm.model_names, osm)],
                                           ["model", *sm.model_names]))
    if args.format == "svg":
        _write(out / "sat.svg", _svg_heatmap(sm.model_names, sm.values))
    return {"models": len(models), "excluded-pairs": len(sm.excluded)}


def cmd_cluster(args) -> dict:
    from archsim.sat import SimilarityMatrix
    from archsim.spectral import adjacency_from_sat, spectral_cluster, spectral_distance_map

    sm = SimilarityMatrix.load(_upstream(args, args.sat, "sat-matrix", "sat.csv", "SAT matrix"))
    A, names, dropped = adjacency_from_sat(sm, args.adjacency)
    k = min(args.k, len(names))
    if k != args.k:
        log.warning("K=%d exceeds %d models; using K=%d", args.k, len(names), k)
    ca = spectral_cluster(A, k=k, restarts=args.restarts, seed=args.seed, names=names)
    ca.dropped = sorted(set(ca.dropped) | set(dropped))
    out = _stage(args, "cluster")
    out.mkdir(parents=True, exist_ok=True)
    ca.save(out / "clusters.json")
    order, D = spectral_distance_map(ca)
    _write(out / "distance-map.csv", _csv([[n, *(f"{v:.6f}" for v in row)] for n, row in zip(order, D)],
                                          ["model", *order]))
    if args.format == "svg":
        _write(out / "distance-map.svg", _svg_heatmap(order, D))
    return {"k": k, "restarts": args.restarts, "objective": ca.kmeans_objective}


def cmd_importance(args) -> dict:
    from archsim.importance import GbmConfig, fit_gbm, importance_table, pair_rows, permutation_importance
    from archsim.sat import SimilarityMatrix

    manifest, _ = _load_zoo(args)
    sm = SimilarityMatrix.load(_upstream(args, args.sat, "sat-matrix", "sat.csv", "SAT matrix"))
    rows = pair_rows(manifest.records(), sm)
    cfg = GbmConfig(stages=args.stages, max_depth=args.max_depth, min_samples_split=args.min_samples_split,
                    min_samples_leaf=args.min_samples_leaf, learning_rate=args.learning_rate, seed=args.seed)
    model = fit_gbm(rows, cfg)
    scores = permutation_importance(model, rows, repeats=args.repeats, seed=args.seed)
    table = importance_table(scores)
    out = _stage(args, "importance")
    _write(out / "importance.csv", _csv([[c, f"{s:.8f}"] for c, s in table], ["component", "importance"]))
    _write(out / "importance.json", _dump(_clean({"train-r2": model.train_r2, "rows": len(rows),
                                                  "config": cfg.__dict__, "importance": dict(table)})))
    return {"train-r2": model.train_r2, "top": table[0][0]}


def cmd_keywords(args) -> dict:
    from archsim.keywords import keyword_table
    from archsim.spectral import ClusterAssignment

    manifest, _ = _load_zoo(args)
    ca = ClusterAssignment.load(_upstream(args, args.clusters, "cluster", "clusters.json", "cluster assignment"))
    table = keyword_table(ca, manifest.records(), args.top_k)
    out = _stage(args, "keywords")
    _write(out / "keywords.json", _dump(_clean(table)))
    _write(out / "keywords.csv", _csv([[r["cluster"], " ".join(r["members"]), *r["keywords"],
                                            *[""] * (args.top_k - len(r["keywords"]))] for r in table],
                                      ["cluster", "members", *(f"keyword-{i + 1}" for i in range(args.top_k))]))
    return {"clusters": len(table)}


def cmd_ensemble(args) -> dict:
    from archsim.ensemble import diversity_protocol, model_logits, similarity_vs_ensemble
    from archsim.sat import SimilarityMatrix
    from archsim.spectral import ClusterAssignment

    manifest, models = _load_zoo(args)
    sm = SimilarityMatrix.load(_upstream(args, args.sat, "sat-matrix", "sat.csv", "SAT matrix"))
    ca = ClusterAssignment.load(_upstream(args, args.clusters, "cluster", "clusters.json", "cluster assignment"))
    ev = manifest.load_dataset().subset("eval")
    logits = model_logits(models, ev)
    corr = similarity_vs_ensemble(sm, logits, ev.labels)
    cluster_of = {n: int(l) for n, l in zip(ca.model_names, ca.labels)}
    proto = []
    for n in args.sizes:
        for k in range(1, n + 1):
            if k > len(set(cluster_of.values())) or n > len(cluster_of):
                continue
            proto.append(diversity_protocol(cluster_of, logits, ev.labels, n, k, args.trials, args.seed).to_dict())
    out = _stage(args, "ensemble")
    _write(out / "ensemble.json", _dump(_clean({"sat-vs-err": corr, "diversity": proto})))
    _write(out / "pairs.csv", _csv([[p["a"], p["b"], f"{p['sat']:.6f}", f"{p['err']:.6f}"] for p in corr["pairs"]],
                                   ["a", "b", "sat", "err"]))
    return {"pearson": corr["pearson"], "protocol-rows": len(proto)}


def cmd_distill(args) -> dict:
    from archsim.ensemble import distill_similarity_study
    from archsim.nn.train import TrainConfig, train
    from archsim.sat import sat
    from archsim.zoo import make_entry

    manifest, models = _load_zoo(args)
    data = manifest.load_dataset()
    cfg = _sat_config(args)
    entry = make_entry(args.student_family, "student", seed=args.seed, epochs=args.epochs)
    tcfg = TrainConfig(**{k: v for k, v in entry.train.items() if k != "teacher"})
    scratch = train(entry.spec, data, tcfg)
    fam = manifest.families()
    teachers = [m for m in models if not args.teachers or m.name in args.teachers]
    sims = {t.name: sat(t, scratch, data, cfg, subsample=True) for t in teachers}
    report = distill_similarity_study(entry.spec, teachers, data, sims, fam, tcfg, scratch)
    _write(_stage(args, "distill") / "distill.json", _dump(_clean(report)))
    return {"teachers": len(teachers)}


def cmd_boundary_lab(args) -> dict:
    from archsim.boundary import planar_dataset, rank_benchmark, train_planar_zoo

    data = planar_dataset(args.seed, args.points)
    zoo = train_planar_zoo(data, seed=args.seed)
    rep = rank_benchmark(zoo, data, grid_n=args.grid_n, num_triplets=args.triplets)
    out = _stage(args, "boundary-lab")
    out.mkdir(parents=True, exist_ok=True)
    _write(out / "boundary-lab.json", _dump(_clean(rep.to_dict())))
    _write(out / "boundary-lab.csv", rep.to_csv())
    if args.format == "svg":
        _write(out / "boundary-lab.svg", rep.to_svg())
    return {"spearman": _clean(rep.rho)}


def cmd_report(args) -> dict:
    base = Path(args.out_dir)
    sections = []

    def load(stage, name):
        p = base / stage / name
        return json.loads(p.read_text()) if p.exists() else None

    zoo = load("train-zoo", "zoo.json")
    lines = ["## Zoo", ""]
    if zoo:
        lines += ["| model | family | clean accuracy |", "|---|---|---|"]
        lines += [f"| {n} | {zoo['families'].get(n, '')} | {zoo['clean-accuracy'][n]:.4f} |" for n in zoo["members"]]
        if zoo["excluded"]:
            lines += ["", "Excluded: " + "; ".join(f"{k} ({v})" for k, v in sorted(zoo["excluded"].items()))]
    else:
        lines.append("_missing: run train-zoo_")
    sections.append(lines)

    sat_csv = base / "sat-matrix" / "sat.csv"
    lines = ["## SAT matrix (ln percent)", ""]
    lines += ["```", sat_csv.read_text().rstrip(), "```"] if sat_csv.exists() else ["_missing: run sat-matrix_"]
    sections.append(lines)

    kw = load("keywords", "keywords.json")
    lines = ["## Clusters and top keywords", ""]
    if kw:
        lines += ["| cluster | members | keywords |", "|---|---|---|"]
        lines += [f"| {r['cluster']} | {', '.join(r['members'])} | {', '.join(r['keywords'])} |" for r in kw]
    else:
        lines.append("_missing: run cluster and keywords_")
    sections.append(lines)

    dm = base / "cluster" / "distance-map.csv"
    lines = ["## Spectral feature distances (sorted by cluster)", ""]
    lines += ["```", dm.read_text().rstrip(), "```"] if dm.exists() else ["_missing: run cluster_"]
    sections.append(lines)

    imp = load("importance", "importance.json")
    lines = ["## Component importance", ""]
    if imp:
        lines += [f"Training R^2 {imp['train-r2']:.4f} over {imp['rows']} pairs.", "",
                  "| component | importance |", "|---|---|"]
        lines += [f"| {c} | {v:.5f} |" for c, v in sorted(imp["importance"].items(), key=lambda t: (-t[1], t[0]))]
    else:
        lines.append("_missing: run importance_")
    sections.append(lines)

    ens = load("ensemble", "ensemble.json")
    lines = ["## Ensembles", ""]
    if ens:
        c = ens["sat-vs-err"]
        lines.append(f"SAT vs 2-ensemble ERR over {c['n']} pairs: Pearson {c['pearson']}, "
                     f"Spearman {c['spearman']}.")
        lines += ["", "| N | k | mean ERR | random ERR |", "|---|---|---|---|"]
        lines += [f"| {r['N']} | {r['k']} | {r['mean-err']} | {r['random-mean-err']} |" for r in ens["diversity"]]
    else:
        lines.append("_missing: run ensemble_")
    sections.append(lines)

    text = "# archsim report\n\n" + "\n\n".join("\n".join(s) for s in sections) + "\n"
    _write(_stage(args, "report") / "report.md", text)
    return {"sections": len(sections)}


COMMANDS = {
    "train-zoo": cmd_train_zoo, "attack": cmd_attack, "sat-matrix": cmd_sat_matrix, "cluster": cmd_cluster,
    "importance": cmd_importance, "keywords": cmd_keywords, "ensemble": cmd_ensemble, "distill": cmd_distill,
    "boundary-lab": cmd_boundary_lab, "report": cmd_report,
}


# ---------------------------------------------------------------- parser


def _attack_flags(p):
    p.add_argument("--method", choices=("pgd", "mifgsm", "fgsm"), default="pgd")
    p.add_argument("--epsilon", type=float, default=8 / 255, help="L-inf budget on [0,1] pixels (default 8/255)")
    p.add_argument("--step-size", type=float, default=0.1)
    p.add_argument("--iterations", type=int, default=50)
    p.add_argument("--momentum-decay", type=float, default=1.0)
    p.add_argument("--epsilon-floor", type=float, default=0.01)
    p.add_argument("--eval-fraction", type=float, default=0.10)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out-dir", default="archsim-out")
    common.add_argument("--threads", type=int, default=os.cpu_count() or 1)
    common.add_argument("--format", choices=("csv", "json", "svg"), default="csv",
                        help="svg additionally renders figures")
    common.add_argument("--log-level", default="WARNING")

    ap = argparse.ArgumentParser(prog="archsim", description=__doc__, parents=[common])
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-zoo", parents=[common], help="train or load the model zoo")
    p.add_argument("--manifest")
    p.add_argument("--per-class", type=int, default=1000)
    p.add_argument("--cache-dir")
    p.add_argument("--accuracy-floor", type=float)

    p = sub.add_parser("attack", parents=[common], help="adversarial examples for zoo members")
    p.add_argument("--zoo")
    p.add_argument("--models", nargs="*")
    _attack_flags(p)

    p = sub.add_parser("sat-matrix", parents=[common], help="pairwise SAT over the zoo")
    p.add_argument("--zoo")
    p.add_argument("--one-sided", action="store_true")
    _attack_flags(p)

    p = sub.add_parser("cluster", parents=[common], help="spectral clustering of the SAT graph")
    p.add_argument("--sat")
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--restarts", type=int, default=100)
    p.add_argument("--adjacency", choices=("percent", "shifted-log"), default="percent")

    p = sub.add_parser("importance", parents=[common], help="GBM permutation importance of components")
    p.add_argument("--zoo")
    p.add_argument("--sat")
    p.add_argument("--stages", type=int, default=500)
    p.add_argument("--max-depth", type=int, default=12)
    p.add_argument("--min-samples-split", type=int, default=4)
    p.add_argument("--min-samples-leaf", type=int, default=1)
    p.add_argument("--learning-rate", type=float, default=0.02)
    p.add_argument("--repeats", type=int, default=10)

    p = sub.add_parser("keywords", parents=[common], help="TF-IDF keywords per cluster")
    p.add_argument("--zoo")
    p.add_argument("--clusters")
    p.add_argument("--top-k", type=int, default=5)

    p = sub.add_parser("ensemble", parents=[common], help="ensemble error analysis")
    p.add_argument("--zoo")
    p.add_argument("--sat")
    p.add_argument("--clusters")
    p.add_argument("--sizes", type=int, nargs="+", default=[2, 3])
    p.add_argument("--trials", type=int, default=100)

    p = sub.add_parser("distill", parents=[common], help="distillation vs similarity study")
    p.add_argument("--zoo")
    p.add_argument("--student-family", default="cnn-patchify-gelu")
    p.add_argument("--teachers", nargs="*")
    p.add_argument("--epochs", type=int, default=10)
    _attack_flags(p)

    p = sub.add_parser("boundary-lab", parents=[common], help="2-D boundary oracle benchmark")
    p.add_argument("--points", type=int, default=3000)
    p.add_argument("--grid-n", type=int, default=200)
    p.add_argument("--triplets", type=int, default=20)

    sub.add_parser("report", parents=[common], help="render a markdown report from stored artifacts")
    return ap


def _config_of(args) -> dict:
    return {k: v for k, v in sorted(vars(args).items())}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    started = time.time()
    out = _stage(args, args.command)
    try:
        if args.threads < 1:
            raise ValueError("--threads must be at least 1")
        summary = COMMANDS[args.command](args)
    except Exception as exc:  # reported as machine-readable JSON
        if isinstance(exc, MissingArtifact):
            code = EXIT_MISSING
        elif isinstance(exc, SchemaMismatch) or "expected format" in str(exc) or "expected archsim" in str(exc):
            code = EXIT_SCHEMA
        elif isinstance(exc, (ValueError, KeyError, TypeError)):
            code = EXIT_CONFIG
        else:
            code = EXIT_INTERNAL
        err = {"error": type(exc).__name__, "message": str(exc), "command": args.command, "exit-code": code}
        log.debug("%s", traceback.format_exc())
        sys.stderr.write(json.dumps(err) + "\n")
        return code
    run = {"command": args.command, "config": _config_of(args), "summary": _clean(summary),
           "version": __version__, "python": platform.python_version(), "numpy": np.__version__,
           "started": started, "elapsed-seconds": round(time.time() - started, 3)}
    _write(out / "run.json", _dump(run))
    sys.stdout.write(json.dumps(_clean(summary), sort_keys=True, default=_jsonable) + "\n")
    return 0


if __name__ == "__main__":
    sys.exit(main())
