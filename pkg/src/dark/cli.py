"""Command-line entry point: ``dark {train,enhance,eval,inspect,gradcheck,hist}``."""

from __future__ import annotations

import argparse
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from dark.data import DatasetError, decode_image, emit_histogram, encode_image, histogram_csv, load_dataset

log = logging.getLogger("dark")


class CliError(Exception):
    pass


def _threads() -> int:
    raw = os.environ.get("DARK_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise CliError(f"DARK_THREADS must be an integer, got {raw!r}") from None
    return max(1, n)


def _limit_blas(n: int):
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def _need_file(path: str, what: str) -> Path:
    p = Path(path)
    if not p.is_file() or not os.access(p, os.R_OK):
        raise CliError(f"cannot read {what}: {p}")
    return p


def _need_dir(path: str, what: str) -> Path:
    p = Path(path)
    if not p.is_dir():
        raise CliError(f"cannot read {what} directory: {p}")
    return p


def _write_text_atomic(path: Path, text: str) -> None:
    from dark.serialization import atomic_write_bytes

    atomic_write_bytes(path, text.encode("utf-8"))


# ------------------------------------------------------------------ commands


def cmd_train(args) -> int:
    from dark.config import load_config
    from dark.train import run_training

    data = _need_dir(args.data, "dataset")
    cfg = load_config(_need_file(args.config, "config") if args.config else None)
    resume = _need_file(args.resume, "checkpoint") if args.resume else None
    train_ds = load_dataset(data, "train")
    try:
        val_ds = load_dataset(data, "test")
    except DatasetError:
        val_ds = None
        log.info("no test split under %s; training without validation", data)
    log.info("training on %d pairs", len(train_ds))
    res = run_training(cfg.model, train_ds, cfg.schedule, cfg.plan, args.seed, loss=cfg.loss,
                       options=cfg.train, out_dir=args.out, resume=resume, val_dataset=val_ds,
                       stop_at=args.iters)
    print(f"trained to iteration {res.state.iteration}; weights at {Path(args.out) / 'weights_final.bin'}")
    return 0


def _image_jobs(src: Path, dst: Path) -> list[tuple[Path, Path]]:
    if src.is_dir():
        dst.mkdir(parents=True, exist_ok=True)
        files = sorted(p for p in src.iterdir() if p.is_file() and p.suffix.lower() == ".png")
        if not files:
            raise CliError(f"no .png images in {src}")
        return [(f, dst / f.name) for f in files]
    if not src.is_file():
        raise CliError(f"cannot read input: {src}")
    if dst.is_dir():
        return [(src, dst / src.name)]
    return [(src, dst)]


def cmd_enhance(args) -> int:
    from dark.config import load_config
    from dark.model import forward_enhance
    from dark.serialization import load_weights

    weights = _need_file(args.weights, "weights")
    cfg = load_config(_need_file(args.config, "config") if args.config else None)
    jobs = _image_jobs(Path(args.inp), Path(args.out))
    model = load_weights(weights, cfg.model)

    def run(job):
        src, dst = job
        img = decode_image(src)
        out = forward_enhance(model, img)
        encode_image(out, dst)
        if args.hist:
            for tag, t in (("input", img), ("output", out)):
                _write_text_atomic(dst.with_name(f"{dst.stem}_{tag}_hist.csv"), histogram_csv(emit_histogram(t)))
        return dst

    workers = min(_threads(), len(jobs))
    with _limit_blas(1 if workers > 1 else _threads()):
        if workers > 1:
            with ThreadPoolExecutor(workers) as pool:
                done = list(pool.map(run, jobs))
        else:
            done = [run(j) for j in jobs]
    for d in done:
        log.info("wrote %s", d)
    print(f"enhanced {len(done)} image(s)")
    return 0


def cmd_eval(args) -> int:
    from dark.config import load_config
    from dark.serialization import load_weights
    from dark.train import evaluate, evaluate_identity

    data = _need_dir(args.data, "dataset")
    ds = load_dataset(data, args.split)
    if args.identity:
        report = evaluate_identity(ds)
    else:
        if not args.weights:
            raise CliError("eval needs --weights (or --identity for the raw-input baseline)")
        weights = _need_file(args.weights, "weights")
        cfg = load_config(_need_file(args.config, "config") if args.config else None)
        with _limit_blas(_threads()):
            report = evaluate(load_weights(weights, cfg.model), ds)
    print(report.to_text())
    _write_text_atomic(Path(args.report), report.to_csv())
    return 0


def cmd_inspect(args) -> int:
    from dark.config import load_config
    from dark.model import build_model, count_parameters, layer_table

    cfg = load_config(_need_file(args.config, "config") if args.config else None)
    model = build_model(cfg.model)
    rows = layer_table(model)
    width = max(len(n) for n, _, _ in rows)
    print(f"{'parameter':<{width}}  {'shape':<18} {'count':>8}")
    for name, shape, n in rows:
        print(f"{name:<{width}}  {str(tuple(shape)):<18} {n:>8,}")
    groups = {}
    for name, _, n in rows:
        key = name.split(".")[0]
        if key == "body":
            key = ".".join(name.split(".")[:2])
        groups[key] = groups.get(key, 0) + n
    print()
    for key, n in groups.items():
        print(f"{key:<{width}}  {'':<18} {n:>8,}")
    print(f"total parameters: {count_parameters(model)}")
    return 0


def cmd_gradcheck(args) -> int:
    from dark.gradcheck import TOLERANCE, run_suite

    results = run_suite(args.seed)
    failed = 0
    for r in results:
        status = "ok" if r.ok else "FAIL"
        failed += not r.ok
        print(f"{status:4}  {r.name:<28} max rel err {r.max_rel_error:.3e}")
    print(f"{len(results) - failed}/{len(results)} passed (tolerance {TOLERANCE:g})")
    return 1 if failed else 0


def cmd_hist(args) -> int:
    src = _need_file(args.inp, "image")
    _write_text_atomic(Path(args.out), histogram_csv(emit_histogram(decode_image(src))))
    return 0


# -------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dark", description="Low-light image enhancement.")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train on a paired dataset")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--config")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--resume")
    t.add_argument("--iters", type=int, help="stop early at this iteration")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("enhance", help="enhance an image or a directory of images")
    e.add_argument("--weights", required=True)
    e.add_argument("--in", dest="inp", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--config")
    e.add_argument("--hist", action="store_true", help="also write input/output histograms")
    e.set_defaults(func=cmd_enhance)

    v = sub.add_parser("eval", help="PSNR/SSIM on a dataset split")
    v.add_argument("--weights")
    v.add_argument("--data", required=True)
    v.add_argument("--config")
    v.add_argument("--split", choices=("train", "test"), default="test")
    v.add_argument("--report", default="eval_report.csv")
    v.add_argument("--identity", action="store_true", help="score raw low-light inputs (baseline)")
    v.set_defaults(func=cmd_eval)

    i = sub.add_parser("inspect", help="print the layer table and parameter count")
    i.add_argument("--config")
    i.set_defaults(func=cmd_inspect)

    g = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gradcheck)

    h = sub.add_parser("hist", help="per-channel 256-bin histogram as CSV")
    h.add_argument("--in", dest="inp", required=True)
    h.add_argument("--out", required=True)
    h.set_defaults(func=cmd_hist)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (CliError, DatasetError, OSError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
