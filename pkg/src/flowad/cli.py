"""Command-line entry point.

Subcommands: synth, train, eval, check, bench. Exit codes: 0 success,
1 runtime/numeric failure, 2 config/usage error. Every command is
deterministic given --seed; the resolved configuration is echoed to
<out>/config.echo as flat key=value lines that re-parse identically.
"""

from __future__ import annotations

import argparse
import statistics
import sys
import time
from pathlib import Path

import numpy as np

from . import flow_core, metrics, mvg_baseline, scoring, synth_data, training
from .errors import ConfigError, FlowadError
from .feature_store import load_manifest, read_pgm, read_pyramid, write_pgm
from .numerics import grad_check
from .synth_data import SynthConfig, load_split_pyramids


def _echo_config(out_dir: Path, args: argparse.Namespace, skip=("func",)) -> None:
    lines = []
    for key, value in sorted(vars(args).items()):
        if key in skip or value is None:
            continue
        if isinstance(value, bool):
            value = "true" if value else "false"
        lines.append(f"{key}={value}")
    (out_dir / "config.echo").write_text("\n".join(lines) + "\n")


def _apply_config_file(parser: argparse.ArgumentParser,
                       argv: list[str]) -> list[str]:
    """Expand --config key=value files into leading CLI flags."""
    if "--config" not in argv:
        return argv
    i = argv.index("--config")
    if i + 1 >= len(argv):
        raise ConfigError("--config requires a path")
    path = Path(argv[i + 1])
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    extra = []
    known = {a.lstrip("-") for action in parser._actions
             for a in action.option_strings}
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value")
        key, value = line.split("=", 1)
        key = key.strip().replace("_", "-")
        if key not in known:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        if value.strip() in ("true", "false"):
            if value.strip() == "true":
                extra.append(f"--{key}")
        else:
            extra += [f"--{key}", value.strip()]
    rest = argv[:i] + argv[i + 2:]
    # config file values come first so explicit flags win
    return extra + rest


def _load_dataset(data_dir: str):
    data = Path(data_dir)
    if not (data / "manifest.tsv").exists():
        raise ConfigError(f"no manifest.tsv under {data}")
    manifest = load_manifest(data / "manifest.tsv")
    return data, manifest


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    scales = tuple(tuple(int(x) for x in s.split("x")) for s in args.scales.split(","))
    config = SynthConfig(
        seed=args.seed, n_train=args.n_train, n_test_good=args.n_test_good,
        n_test_anom=args.n_test_anom, scales=scales,
        image_size=(args.image_size, args.image_size),
        patch_min=args.patch_min, patch_max=args.patch_max,
        shift=args.shift, mean_amplitude=args.mean_amplitude,
        unit_covariance=args.unit_covariance)
    synth_data.generate(config, out)
    _echo_config(out, args)
    print(f"wrote synthetic dataset to {out}")
    return 0


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def cmd_train(args) -> int:
    data, manifest = _load_dataset(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train_pyramids = load_split_pyramids(data, manifest, "train")
    if not train_pyramids:
        raise ConfigError("dataset has no train images")
    ckpt = out / "checkpoint.cfck"

    if args.model == "mvg":
        model = mvg_baseline.fit_mvg(train_pyramids, ridge=args.ridge)
        mvg_baseline.save_mvg_checkpoint(ckpt, model)
        _echo_config(out, args)
        print(f"fitted MVG baseline -> {ckpt}")
        return 0

    dims = [m.shape[2] for m in train_pyramids[0].scales]
    cond_dim = 0 if args.no_condition else args.condition_dim
    model = flow_core.build_flow_model(
        dims, cond_dim=cond_dim, num_layers=args.layers,
        clamp=args.clamp, seed=args.seed)
    config = training.TrainConfig(
        learning_rate=args.lr, epochs=args.epochs,
        image_batch=args.image_batch, vector_batch=args.vector_batch,
        warmup_epochs=args.warmup_epochs, seed=args.seed)
    trainer = training.Trainer(model, train_pyramids, config)
    state_path = out / "train_state.npz"
    if args.resume and state_path.exists():
        trainer.load_state(state_path)
        print(f"resuming from epoch {trainer.completed_epochs}")
    for epoch in range(trainer.completed_epochs, config.epochs):
        recs = trainer.train_epoch(epoch)
        trainer.save_state(state_path)
        summary = " ".join(f"scale{r.scale}={r.mean_loss:.4f}" for r in recs)
        print(f"epoch {epoch + 1}/{config.epochs} {summary}")
    flow_core.save_checkpoint(ckpt, model)
    training.write_loss_csv(out / "loss.csv", trainer.records)
    _echo_config(out, args)
    print(f"trained flow -> {ckpt}")
    return 0


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

def _score_dataset(checkpoint: Path, data: Path, manifest, args):
    """Returns (anomaly maps, image scores, labels, masks) over the test set."""
    test = manifest.test_entries()
    pyramids = [read_pyramid(data / "features" / f"{e.image_id}.cfpd")
                for e in test]
    ih, iw = manifest.image_size

    if not checkpoint.exists():
        raise ConfigError(f"checkpoint not found: {checkpoint}")
    blob = checkpoint.read_bytes()[:4]
    if blob == mvg_baseline.MVG_MAGIC:
        model = mvg_baseline.load_mvg_checkpoint(checkpoint)
        per_scale = [mvg_baseline.mahalanobis_score_map(model, p)
                     for p in pyramids]
        num_scales = model.num_scales
        # Mahalanobis is already high = anomalous: min-max normalize per
        # scale over the set, upsample, and sum
        per_image = []
        for i in range(len(pyramids)):
            per_image.append([])
        for k in range(num_scales):
            grids = [ps[k] for ps in per_scale]
            lo = min(float(g.min()) for g in grids)
            hi = max(float(g.max()) for g in grids)
            span = (hi - lo) or 1.0
            for i, g in enumerate(grids):
                per_image[i].append(
                    scoring.upsample_bilinear((g - lo) / span, ih, iw))
        amaps = [scoring.AnomalyMap(scores=np.sum(mk, axis=0), per_scale=mk)
                 for mk in per_image]
    else:
        model = flow_core.load_checkpoint(checkpoint)
        ll = [scoring.likelihood_maps(model, p, eval_batch=args.eval_batch)
              for p in pyramids]
        per_image = [[None] * model.num_scales for _ in pyramids]
        for k in range(model.num_scales):
            probs = scoring.normalize_probabilities(
                [m[k].values for m in ll])
            for i, p in enumerate(probs):
                per_image[i][k] = scoring.upsample_bilinear(p, ih, iw)
        amaps = scoring.aggregate(per_image)

    img_scores = np.array([
        scoring.image_score(a, mode=args.image_score, top_quantile=args.topq)
        for a in amaps])
    labels = np.array([1 if e.label == "anomalous" else 0 for e in test])
    masks = []
    for e in test:
        if e.mask_path:
            masks.append(read_pgm(data / e.mask_path))
        elif manifest.masks_available:
            masks.append(np.zeros(manifest.image_size, dtype=np.int64))
        else:
            masks.append(None)
    return amaps, img_scores, labels, masks, test


def cmd_eval(args) -> int:
    data, manifest = _load_dataset(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    checkpoints = [Path(c) for c in args.checkpoint]
    if args.repeats is not None and args.repeats != len(checkpoints):
        raise ConfigError(
            f"--repeats {args.repeats} but {len(checkpoints)} checkpoints given")

    reports = []
    for ckpt in checkpoints:
        amaps, img_scores, labels, masks, test = _score_dataset(
            ckpt, data, manifest, args)
        if manifest.masks_available:
            rep = metrics.evaluate(
                img_scores, labels,
                score_maps=[a.scores for a in amaps], gt_masks=masks,
                per_image_auroc=(args.localization == "per-image"))
        else:
            rep = metrics.evaluate(img_scores, labels)
        reports.append(rep)
        last_maps, last_masks = amaps, masks

    rows = [(f"run{i}", rep) for i, rep in enumerate(reports)]
    if len(reports) > 1:
        def agg(get):
            vals = [get(r) for r in reports if get(r) is not None]
            return (statistics.mean(vals),
                    statistics.stdev(vals) if len(vals) > 1 else 0.0)
        lines = ["metric,mean,std"]
        for name, get in (("detection_auroc", lambda r: r.detection_auroc),
                          ("localization_auroc", lambda r: r.localization_auroc),
                          ("aupro", lambda r: r.aupro)):
            mu, sigma = agg(get)
            lines.append(f"{name},{mu:.6f},{sigma:.6f}")
        (out / "report_summary.csv").write_text("\n".join(lines) + "\n")
    metrics.write_report_csv(out / "report.csv", rows)

    # threshold from the last run's maps when masks exist
    if manifest.masks_available:
        flat_scores = np.concatenate([a.scores.reshape(-1) for a in last_maps])
        flat_labels = np.concatenate(
            [(m > 0).reshape(-1).astype(int) for m in last_masks])
        tau, f1 = scoring.f1_threshold(flat_scores, flat_labels)
        (out / "threshold.csv").write_text(
            f"threshold,f1\n{tau:.8g},{f1:.8g}\n")

    if args.emit_maps:
        maps_dir = out / "maps"
        maps_dir.mkdir(exist_ok=True)
        top = max(float(a.scores.max()) for a in last_maps) or 1.0
        for a, e in zip(last_maps, test):
            scaled = a.scores / top * 65535.0
            write_pgm(maps_dir / f"{e.image_id}.pgm", scaled, maxval=65535,
                      comment=f"anomaly scores min-max scaled by {top:.8g}")
    if args.emit_hist:
        scoring.score_histogram_csv(out / "hist.csv", last_maps, last_masks)

    _echo_config(out, args, skip=("func", "checkpoint"))
    for name, rep in rows:
        print(name, rep.csv_row(name))
    return 0


# ---------------------------------------------------------------------------
# check
# ---------------------------------------------------------------------------

def cmd_check(args) -> int:
    rng = np.random.default_rng(args.seed)
    failures = []

    def gate(name, worst, tol):
        status = "PASS" if worst < tol else "FAIL"
        print(f"[{status}] {name}: worst {worst:.3e} (tolerance {tol:g})")
        if worst >= tol:
            failures.append(name)

    if args.checkpoint:
        model = flow_core.load_checkpoint(Path(args.checkpoint))
        decoders = model.decoders
    else:
        decoders = [flow_core.ScaleDecoder(dim=d, cond_dim=8, num_layers=4,
                                           perm_seed=args.seed + d)
                    for d in (2, 4, 8)]
        for dec in decoders:
            _randomize(dec, rng, scale=0.3)

    # identity between the flow likelihood gap and the Mahalanobis form
    worst = 0.0
    per_decoder = max(1, args.tuples // len(decoders))
    for dec in decoders:
        d = dec.dim
        for _ in range(per_decoder):
            q, _ = np.linalg.qr(rng.standard_normal((d, d)))
            cov = (q * rng.uniform(0.5, 2.0, size=d)) @ q.T
            target = mvg_baseline.MvgPosition(
                mean=rng.standard_normal(d),
                chol=np.linalg.cholesky(cov))
            z = rng.standard_normal(d)
            c = rng.standard_normal(dec.cond_dim)
            _, _, gap = mvg_baseline.reverse_kl_identity_check(dec, target, z, c)
            if args.corrupt_logdet:
                gap += 1.0
            worst = max(worst, gap)
    gate("mahalanobis identity", worst, 1e-8)

    # analytic vs numerical Jacobian log-determinant
    worst = 0.0
    for dec in decoders:
        if dec.dim > 6:
            continue
        for _ in range(5):
            z = rng.standard_normal(dec.dim)
            c = rng.standard_normal(dec.cond_dim)
            worst = max(worst, _jacobian_gap(dec, z, c))
    gate("jacobian log-det", worst, 1e-4)

    # gradient of the training loss vs finite differences
    dec = decoders[0] if decoders[0].dim <= 4 else flow_core.ScaleDecoder(
        dim=4, cond_dim=8, num_layers=2, perm_seed=args.seed)
    worst = _loss_grad_gap(dec, rng)
    gate("loss gradient", worst, 1e-6)

    print("all checks passed" if not failures
          else f"FAILED: {', '.join(failures)}")
    return 0 if not failures else 1


def _randomize(dec, rng, scale=0.5):
    flat = dec.get_parameters()
    dec.set_parameters(flat + scale * rng.standard_normal(flat.size))


def _jacobian_gap(dec, z, c, h=1e-6):
    d = z.size
    c2 = c.reshape(1, -1)
    jac = np.empty((d, d))
    for j in range(d):
        zp, zm = z.copy(), z.copy()
        zp[j] += h
        zm[j] -= h
        up, _ = dec.inverse(zp.reshape(1, -1), c2)
        um, _ = dec.inverse(zm.reshape(1, -1), c2)
        jac[:, j] = (up[0] - um[0]) / (2 * h)
    _, analytic = dec.inverse(z.reshape(1, -1), c2)
    numeric = np.log(abs(np.linalg.det(jac)))
    denom = max(abs(numeric), abs(float(analytic[0])), 1e-8)
    return abs(numeric - float(analytic[0])) / denom


def _loss_grad_gap(dec, rng, n=8):
    z = rng.standard_normal((n, dec.dim))
    c = rng.standard_normal((n, dec.cond_dim))
    names = [name for name, _ in training._named_layer_arrays(dec)]

    def objective(tensors):
        from . import numerics as nx
        params = dict(zip(names, tensors))
        tape = tensors[0].tape
        zt = nx.Tensor(z, tape=tape)
        ct = nx.Tensor(c, tape=tape)
        u, logdet = dec.traced_inverse(tape, zt, ct, params)
        per_row = nx.sub(nx.scale(nx.row_sum(nx.square(u)), 0.5), logdet)
        return nx.scale(nx.sum_all(per_row), 1.0 / n)

    values = [arr for _, arr in training._named_layer_arrays(dec)]
    # fourth-order differences keep truncation negligible at this step
    # size, and the larger step keeps rounding noise below the gate for
    # near-zero gradient entries
    return grad_check(objective, values, h=1e-4)


# ---------------------------------------------------------------------------
# bench
# ---------------------------------------------------------------------------

def cmd_bench(args) -> int:
    data, manifest = _load_dataset(args.data)
    ckpt = Path(args.checkpoint)
    test = manifest.test_entries() or manifest.train_entries()
    pyramid = read_pyramid(data / "features" / f"{test[0].image_id}.cfpd")

    blob = ckpt.read_bytes()[:4]
    if blob == mvg_baseline.MVG_MAGIC:
        model = mvg_baseline.load_mvg_checkpoint(ckpt)
        kind = "mvg"

        def run():
            mvg_baseline.mahalanobis_score_map(model, pyramid)
    else:
        model = flow_core.load_checkpoint(ckpt)
        kind = "flow"

        def run():
            scoring.likelihood_maps(model, pyramid, eval_batch=args.eval_batch)

    run()  # warm-up
    times = []
    for _ in range(args.iters):
        t0 = time.perf_counter()
        run()
        times.append(time.perf_counter() - t0)
    times.sort()
    median = times[len(times) // 2]
    q1 = times[len(times) // 4]
    q3 = times[(3 * len(times)) // 4]
    param_bytes = model.parameter_bytes()
    lines = ["metric,value",
             f"kind,{kind}",
             f"pyramids_per_sec,{1.0 / median:.4f}",
             f"median_sec,{median:.6f}",
             f"iqr_sec,{q3 - q1:.6f}",
             f"param_bytes,{param_bytes}"]
    report = "\n".join(lines)
    print(report)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "bench.csv").write_text(report + "\n")
        _echo_config(out, args)
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="flowad",
        description="Conditional-flow anomaly detection over feature pyramids")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--config", help="flat key=value config file")
        sp.add_argument("--threads", type=int, default=1,
                        help="worker threads (metrics are thread-invariant)")

    sp = sub.add_parser("synth", help="generate a synthetic dataset")
    common(sp)
    sp.add_argument("--out", required=True)
    sp.add_argument("--n-train", type=int, default=16)
    sp.add_argument("--n-test-good", type=int, default=8)
    sp.add_argument("--n-test-anom", type=int, default=8)
    sp.add_argument("--scales", default="8x8x8,16x16x4",
                    help="comma-separated HxWxD per scale, deepest first")
    sp.add_argument("--image-size", type=int, default=64)
    sp.add_argument("--patch-min", type=int, default=4)
    sp.add_argument("--patch-max", type=int, default=8)
    sp.add_argument("--shift", type=float, default=6.0)
    sp.add_argument("--mean-amplitude", type=float, default=1.0)
    sp.add_argument("--unit-covariance", action="store_true")
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("train", help="train a flow or fit the MVG baseline")
    common(sp)
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--model", choices=("flow", "mvg"), default="flow")
    sp.add_argument("--no-condition", action="store_true",
                    help="unconditional ablation (condition dim 0)")
    sp.add_argument("--layers", type=int, default=flow_core.DEFAULT_LAYERS)
    sp.add_argument("--condition-dim", type=int,
                    default=flow_core.DEFAULT_CONDITION_DIM)
    sp.add_argument("--clamp", type=float, default=flow_core.DEFAULT_CLAMP)
    sp.add_argument("--epochs", type=int, default=100)
    sp.add_argument("--lr", type=float, default=2e-4)
    sp.add_argument("--image-batch", type=int, default=32)
    sp.add_argument("--vector-batch", type=int, default=8192)
    sp.add_argument("--warmup-epochs", type=int, default=2)
    sp.add_argument("--ridge", type=float, default=mvg_baseline.DEFAULT_RIDGE)
    sp.add_argument("--resume", action="store_true")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="score a test set and report metrics")
    common(sp)
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--checkpoint", action="append", required=True,
                    help="repeatable for mean/std reporting")
    sp.add_argument("--repeats", type=int,
                    help="assert this many checkpoints were given")
    sp.add_argument("--eval-batch", type=int, default=8192)
    sp.add_argument("--image-score", choices=("max", "topq"), default="max")
    sp.add_argument("--topq", type=float, default=0.01)
    sp.add_argument("--localization", choices=("pooled", "per-image"),
                    default="pooled")
    sp.add_argument("--emit-maps", action="store_true")
    sp.add_argument("--emit-hist", action="store_true")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("check", help="numerical identity and gradient gates")
    common(sp)
    sp.add_argument("--checkpoint")
    sp.add_argument("--tuples", type=int, default=1000)
    sp.add_argument("--corrupt-logdet", action="store_true",
                    help=argparse.SUPPRESS)
    sp.set_defaults(func=cmd_check)

    sp = sub.add_parser("bench", help="throughput and parameter-size report")
    common(sp)
    sp.add_argument("--data", required=True)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--out")
    sp.add_argument("--iters", type=int, default=30)
    sp.add_argument("--eval-batch", type=int, default=8192)
    sp.set_defaults(func=cmd_bench)
    return p


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        if argv and argv[0] in _command_names(parser):
            argv = [argv[0]] + _apply_config_file(
                _subparser_for(parser, argv[0]), argv[1:])
        args = parser.parse_args(argv)
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except FlowadError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


def _command_names(parser):
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return set(action.choices)
    return set()


def _subparser_for(parser, name):
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices[name]
    raise ConfigError(f"unknown command {name!r}")


if __name__ == "__main__":
    sys.exit(main())
