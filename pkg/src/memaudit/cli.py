"""memaudit command line: preprocess, audit, metrics, plant, report.

Exit codes are part of the interface so CI pipelines can gate on them:
0 success, 1 audit completed and flagged memorization, 2 usage error,
3 I/O / format / data error. Reports are written atomically; two runs
with identical inputs and seeds produce byte-identical reports.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

from ._rng import SplitMix64
from .core import Dataset, VolumeRecord, resolve_channel_mask
from .correlate import (
    max_correlations,
    max_correlations_embeddings,
    plan_audit,
)
from .errors import MemauditError
from .harness import PlantConfig, plant, save_ground_truth
from .ingest import (
    EmbeddingSet,
    load_dataset,
    load_embedding_set,
    load_manifest,
    load_records,
    read_embeddings,
    write_ivc,
    write_manifest,
)
from .metrics import (
    SsimParams,
    fid,
    gaussian_stats,
    inception_score,
    mutual_information,
    ssim,
)
from .preprocess import (
    SliceFilterRule,
    remap_labels,
    rescale_intensity,
    resize_bilinear,
    slice_volume,
    zero_pad,
)
from .report import (
    build_audit_report,
    export_report,
    load_matches,
    parse_rule,
    report_to_csv,
    report_to_dict,
    save_matches,
)

log = logging.getLogger("memaudit")

EXIT_OK = 0
EXIT_FLAGGED = 1
EXIT_USAGE = 2
EXIT_DATA = 3


class UsageError(Exception):
    """Bad flag combination detected before any heavy work."""


@dataclass(frozen=True)
class RunConfig:
    """Validated global options shared by all subcommands."""

    workers: int
    quiet: bool
    log_level: str
    progress_interval: float

    def __post_init__(self):
        if self.workers < 1:
            raise UsageError(f"--workers must be >= 1, got {self.workers}")
        if self.progress_interval < 0:
            raise UsageError("--progress-interval must be >= 0")


class ProgressPrinter:
    """Periodic status lines: done/total, rate, ETA."""

    def __init__(self, label: str, interval: float, stream=None):
        self.label = label
        self.interval = interval
        self.stream = stream if stream is not None else sys.stderr
        self._start = time.monotonic()
        self._last = float("-inf")
        self._finished = False

    def __call__(self, done: int, total: int) -> None:
        now = time.monotonic()
        finished = done >= total
        if not finished and now - self._last < self.interval:
            return
        if finished and self._finished:
            return
        self._last = now
        self._finished = finished
        elapsed = max(now - self._start, 1e-9)
        pct = 100.0 * done / total if total else 100.0
        rate = done / elapsed
        if finished:
            line = (
                f"[{self.label}] {done:,}/{total:,} (100.0%) "
                f"done in {elapsed:.1f}s ({rate / 1e6:.1f}M cmp/s)"
            )
        else:
            remaining = (total - done) / rate if rate > 0 else 0.0
            line = (
                f"[{self.label}] {done:,}/{total:,} ({pct:.1f}%) "
                f"{rate / 1e6:.1f}M cmp/s ETA {remaining:.0f}s"
            )
        print(line, file=self.stream, flush=True)


# ---------------------------------------------------------------------------
# Flag parsing helpers
# ---------------------------------------------------------------------------


def _parse_channels(text: Optional[str]):
    if text is None:
        return None
    try:
        return tuple(int(c) for c in text.split(",") if c.strip() != "")
    except ValueError:
        raise UsageError(f"--channels expects integers like '0,1,2', got {text!r}")


def _parse_remap(text: str) -> dict[float, float]:
    mapping = {}
    for piece in text.split(","):
        key, sep, value = piece.partition("=")
        if not sep:
            raise UsageError(f"--remap expects 'old=new' pairs, got {piece!r}")
        try:
            mapping[float(key)] = float(value)
        except ValueError:
            raise UsageError(f"--remap has a non-numeric pair {piece!r}")
    return mapping


def _progress(cfg: RunConfig, label: str):
    return None if cfg.quiet else ProgressPrinter(label, cfg.progress_interval)


def _sample_ids(n_total: int, n_sample: int, seed: int) -> list[int]:
    return SplitMix64(seed).sample_without_replacement(n_total, n_sample)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def _cmd_preprocess(args, cfg: RunConfig) -> int:
    manifest = load_manifest(args.manifest)
    _, records = load_records(manifest)
    rule = SliceFilterRule(
        min_fraction=args.min_fraction,
        intensity_threshold=args.threshold,
        channel=args.filter_channel,
    )
    remap = _parse_remap(args.remap) if args.remap else None
    rescale_channels = _parse_channels(args.rescale_channels)
    remap_channels = _parse_channels(args.remap_channels)

    images = []
    for rec in records:
        if isinstance(rec, VolumeRecord):
            images.extend(slice_volume(rec, rule))
        else:
            images.append(rec)
    log.info("preprocess: %d record(s) -> %d slice(s)", len(records), len(images))

    out = []
    for img in images:
        if args.pad:
            img = zero_pad(img, args.pad[0], args.pad[1])
        if args.rescale:
            img = rescale_intensity(img, channels=rescale_channels)
        if remap:
            img = remap_labels(img, remap, channels=remap_channels)
        if args.resize:
            img = resize_bilinear(img, args.resize[0], args.resize[1])
        out.append(img)
    if not out:
        raise MemauditError("preprocess produced no images (filter dropped everything)")

    container = Path(args.out_container)
    tmp = container.with_name(container.name + f".tmp{os.getpid()}")
    write_ivc(out, tmp, dtype=args.dtype)
    os.replace(tmp, container)
    out_manifest = Path(args.out_manifest)
    write_manifest(
        out_manifest,
        name=f"{manifest.name}-pre",
        role=manifest.role,
        files=[os.path.relpath(container, out_manifest.parent)],
    )
    log.info("preprocess: wrote %d image(s) to %s", len(out), container)
    return EXIT_OK


def _is_embedding_manifest(path) -> bool:
    manifest = load_manifest(path)
    return all(fmt == "emb" for fmt, _ in manifest.entries)


def _audit_images(args, cfg: RunConfig):
    train = load_dataset(args.train)
    synthetic = load_dataset(args.synthetic)
    channels = _parse_channels(args.channels)
    sample_ids = None
    if args.sample is not None and args.sample < len(synthetic):
        picks = _sample_ids(len(synthetic), args.sample, args.seed)
        synthetic = Dataset(
            synthetic.name, "synthetic",
            tuple(synthetic.images[i] for i in picks),
        )
        sample_ids = [img.id for img in synthetic.images]
    c, h, w = train.shape
    n_vec = len(resolve_channel_mask(channels, c)) * h * w
    plan = plan_audit(len(synthetic), len(train), n_vec, args.block_budget_mib)
    log.info(
        "audit: %d synthetic x %d train = %s comparisons",
        plan.n_query, plan.n_reference, f"{plan.total_comparisons:,}",
    )
    common = dict(
        channel_mask=channels, mode=args.channel_mode, workers=cfg.workers,
        block_budget_mib=args.block_budget_mib,
    )
    synth_vs_train = max_correlations(
        synthetic, train, k=args.k,
        progress=_progress(cfg, "synth-vs-train"), **common,
    )
    baseline = synth_vs_test = None
    if args.test:
        test = load_dataset(args.test)
        baseline = max_correlations(
            test, train, k=1, progress=_progress(cfg, "test-vs-train"), **common
        )
        synth_vs_test = max_correlations(
            synthetic, test, k=1,
            progress=_progress(cfg, "synth-vs-test"), **common,
        )
    return plan, synth_vs_train, baseline, synth_vs_test, sample_ids


def _audit_embeddings(args, cfg: RunConfig):
    train = load_embedding_set(args.train)
    synthetic = load_embedding_set(args.synthetic)
    sample_ids = None
    if args.sample is not None and args.sample < len(synthetic):
        picks = _sample_ids(len(synthetic), args.sample, args.seed)
        synthetic = EmbeddingSet(
            tuple(synthetic.ids[i] for i in picks),
            synthetic.dim,
            synthetic.rows[picks],
        )
        sample_ids = list(synthetic.ids)
    plan = plan_audit(len(synthetic), len(train), train.dim, args.block_budget_mib)
    common = dict(
        metric=args.metric, workers=cfg.workers,
        block_budget_mib=args.block_budget_mib,
    )
    synth_vs_train = max_correlations_embeddings(
        synthetic, train, k=args.k,
        progress=_progress(cfg, "synth-vs-train"), **common,
    )
    baseline = synth_vs_test = None
    if args.test:
        test = load_embedding_set(args.test)
        baseline = max_correlations_embeddings(
            test, train, k=1, progress=_progress(cfg, "test-vs-train"), **common
        )
        synth_vs_test = max_correlations_embeddings(
            synthetic, test, k=1,
            progress=_progress(cfg, "synth-vs-test"), **common,
        )
    return plan, synth_vs_train, baseline, synth_vs_test, sample_ids


def _cmd_audit(args, cfg: RunConfig) -> int:
    if args.sample is not None and args.seed is None:
        raise UsageError("--sample requires an explicit --seed")
    kind, _ = parse_rule(args.rule)  # validate before heavy work
    if kind == "percentile" and not args.test:
        raise UsageError(
            "percentile threshold rules need --test as the baseline; "
            "use --rule fixed:V to audit without one"
        )

    if _is_embedding_manifest(args.train):
        plan, synth_vs_train, baseline, synth_vs_test, sample_ids = _audit_embeddings(
            args, cfg
        )
    else:
        plan, synth_vs_train, baseline, synth_vs_test, sample_ids = _audit_images(
            args, cfg
        )

    metrics_table = {}
    if args.fid_embeddings:
        real, synth = (read_embeddings(p) for p in args.fid_embeddings)
        metrics_table["fid"] = fid(gaussian_stats(real), gaussian_stats(synth))
    if args.is_probs:
        is_mean, is_std = inception_score(
            read_embeddings(args.is_probs), splits=args.is_splits
        )
        metrics_table["is_mean"] = is_mean
        metrics_table["is_std"] = is_std

    report = build_audit_report(
        plan,
        synth_vs_train,
        baseline=baseline,
        synth_vs_test=synth_vs_test,
        rule=args.rule,
        histogram_bins=args.histogram_bins,
        metrics_table=metrics_table,
        sample_ids=sample_ids,
    )

    if args.matches_out:
        save_matches(synth_vs_train, args.matches_out, "synth-vs-train", plan)
    if args.baseline_matches_out:
        if baseline is None:
            raise UsageError("--baseline-matches-out needs --test")
        save_matches(baseline, args.baseline_matches_out, "test-vs-train", plan)

    if args.out:
        export_report(report, args.out, args.format)
        log.info("audit: report written to %s", args.out)
    else:
        if args.format == "json":
            import json as _json

            print(_json.dumps(report_to_dict(report), indent=2))
        else:
            print(report_to_csv(report), end="")

    if not cfg.quiet:
        print(
            f"[audit] {len(report.flagged)} of {report.summaries[0].n} synthetic "
            f"image(s) at or above threshold {report.threshold.value:.6f} "
            f"({report.threshold.provenance})",
            file=sys.stderr,
        )
    return EXIT_FLAGGED if report.flagged else EXIT_OK


def _paired_images(path_a, path_b):
    a = load_dataset(path_a)
    b = load_dataset(path_b)
    if len(a) != len(b):
        raise MemauditError(
            f"paired manifests differ in size: {len(a)} vs {len(b)}"
        )
    return a, b


def _cmd_metrics(args, cfg: RunConfig) -> int:
    wanted = [args.ssim_pairs, args.mi_pairs, args.fid, args.inception]
    if not any(wanted):
        raise UsageError(
            "nothing to do: pass --ssim-pairs, --mi-pairs, --fid or --is"
        )
    result: dict = {}
    if args.ssim_pairs:
        a, b = _paired_images(*args.ssim_pairs)
        params = SsimParams(window=args.ssim_window, sigma=args.ssim_sigma)
        values = [
            {"a": x.id, "b": y.id, "ssim": ssim(x, y, params)}
            for x, y in zip(a.images, b.images)
        ]
        result["ssim"] = {
            "pairs": values,
            "mean": sum(v["ssim"] for v in values) / len(values),
        }
    if args.mi_pairs:
        a, b = _paired_images(*args.mi_pairs)
        values = [
            {"a": x.id, "b": y.id, "mi_bits": mutual_information(x, y, args.mi_bins)}
            for x, y in zip(a.images, b.images)
        ]
        result["mutual_information"] = {
            "pairs": values,
            "mean": sum(v["mi_bits"] for v in values) / len(values),
        }
    if args.fid:
        real, synth = (read_embeddings(p) for p in args.fid)
        result["fid"] = fid(gaussian_stats(real), gaussian_stats(synth))
    if args.inception:
        mean, std = inception_score(read_embeddings(args.inception), args.is_splits)
        result["inception_score"] = {"mean": mean, "std": std}

    import json as _json

    text = _json.dumps(result, indent=2) + "\n"
    if args.out:
        from .report import atomic_write_text

        atomic_write_text(args.out, text)
    else:
        print(text, end="")
    return EXIT_OK


def _cmd_plant(args, cfg: RunConfig) -> int:
    train = load_dataset(args.train)
    config = PlantConfig(
        n_output=args.n,
        p_copy=args.p_copy,
        p_noisy=args.p_noisy,
        p_shift=args.p_shift,
        noise_sigma=args.sigma,
        shift_pixels=args.shift,
        seed=args.seed,
    )
    dataset, truth = plant(train, config)
    container = Path(args.out)
    tmp = container.with_name(container.name + f".tmp{os.getpid()}")
    write_ivc(list(dataset.images), tmp)
    os.replace(tmp, container)
    save_ground_truth(truth, args.truth)
    manifest_path = Path(args.out_manifest) if args.out_manifest else container.with_suffix(".mf")
    write_manifest(
        manifest_path,
        name=dataset.name,
        role="synthetic",
        files=[os.path.relpath(container, manifest_path.parent)],
    )
    counts = truth.kind_counts()
    log.info(
        "plant: wrote %d image(s) (%s) to %s",
        len(dataset),
        ", ".join(f"{k}={v}" for k, v in counts.items() if v),
        container,
    )
    return EXIT_OK


def _cmd_report(args, cfg: RunConfig) -> int:
    _, plan, synth_matches = load_matches(args.matches)
    if plan is None:
        raise MemauditError(
            f"{args.matches} has no comparison plan; regenerate it with "
            "'memaudit audit --matches-out'"
        )
    baseline = None
    if args.baseline:
        _, _, baseline = load_matches(args.baseline)
    report = build_audit_report(
        plan,
        synth_matches,
        baseline=baseline,
        rule=args.rule,
        histogram_bins=args.histogram_bins,
    )
    if args.out:
        export_report(report, args.out, args.format)
    else:
        if args.format == "json":
            import json as _json

            print(_json.dumps(report_to_dict(report), indent=2))
        else:
            print(report_to_csv(report), end="")
    return EXIT_FLAGGED if report.flagged else EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument(
        "--workers", type=int, default=None,
        help="thread count for the correlation engine "
        "(default: MEMAUDIT_WORKERS or 1)",
    )
    common.add_argument("--quiet", action="store_true", help="suppress progress lines")
    common.add_argument(
        "--log-level", default="warning",
        choices=["debug", "info", "warning", "error"],
    )
    common.add_argument(
        "--progress-interval", type=float, default=5.0,
        help="seconds between progress lines",
    )

    parser = argparse.ArgumentParser(
        prog="memaudit",
        description="Audit whether synthetic images memorize their training set.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser(
        "preprocess", parents=[common],
        help="slice volumes, filter, pad, rescale, remap, resize",
    )
    p.add_argument("--manifest", required=True)
    p.add_argument("--out-container", required=True)
    p.add_argument("--out-manifest", required=True)
    p.add_argument("--min-fraction", type=float, default=0.15)
    p.add_argument("--threshold", type=float, default=50.0)
    p.add_argument("--filter-channel", type=int, default=0)
    p.add_argument("--pad", nargs=2, type=int, metavar=("H", "W"))
    p.add_argument("--resize", nargs=2, type=int, metavar=("H", "W"))
    p.add_argument("--rescale", action="store_true")
    p.add_argument("--rescale-channels", help="e.g. '0,1,2,3' to skip an annotation channel")
    p.add_argument("--remap", help="e.g. '1=51,2=102,4=204'")
    p.add_argument("--remap-channels", help="e.g. '4' to remap only the annotation channel")
    p.add_argument("--dtype", choices=["auto", "u8", "f32"], default="auto")

    a = sub.add_parser(
        "audit", parents=[common],
        help="max-correlation audit of a synthetic set against training data",
    )
    a.add_argument("--train", required=True)
    a.add_argument("--synthetic", required=True)
    a.add_argument("--test", help="held-out set for the baseline distribution")
    a.add_argument("--channels", help="channel mask, e.g. '0,1,2,3'")
    a.add_argument("--channel-mode", choices=["concat", "mean"], default="concat")
    a.add_argument("--metric", choices=["pearson", "cosine"], default="pearson",
                   help="similarity for embedding manifests")
    a.add_argument("--k", type=int, default=5)
    a.add_argument("--sample", type=int, nargs="?", const=1000, default=None,
                   help="audit a random sample of N synthetic images (default N=1000)")
    a.add_argument("--seed", type=int, help="sampling seed (required with --sample)")
    a.add_argument("--block-budget-mib", type=float, default=32.0)
    a.add_argument("--rule", default="percentile:99.5",
                   help="'percentile:P' of the baseline or 'fixed:V'")
    a.add_argument("--histogram-bins", type=int, default=50)
    a.add_argument("--format", choices=["json", "csv"], default="json")
    a.add_argument("--out", help="report path (default: stdout)")
    a.add_argument("--matches-out", help="save synth-vs-train matches as JSON")
    a.add_argument("--baseline-matches-out", help="save test-vs-train matches as JSON")
    a.add_argument("--fid-embeddings", nargs=2, metavar=("REAL", "SYNTH"))
    a.add_argument("--is-probs", metavar="PROBS")
    a.add_argument("--is-splits", type=int, default=10)

    m = sub.add_parser("metrics", parents=[common], help="SSIM / MI / FID / IS")
    m.add_argument("--ssim-pairs", nargs=2, metavar=("A", "B"))
    m.add_argument("--mi-pairs", nargs=2, metavar=("A", "B"))
    m.add_argument("--fid", nargs=2, metavar=("REAL", "SYNTH"))
    m.add_argument("--is", dest="inception", metavar="PROBS")
    m.add_argument("--splits", dest="is_splits", type=int, default=10)
    m.add_argument("--mi-bins", type=int, default=64)
    m.add_argument("--ssim-window", type=int, default=11)
    m.add_argument("--ssim-sigma", type=float, default=1.5)
    m.add_argument("--out")

    g = sub.add_parser(
        "plant", parents=[common],
        help="generate a synthetic set with planted copies for validation",
    )
    g.add_argument("--train", required=True)
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--p-copy", type=float, default=0.0)
    g.add_argument("--p-noisy", type=float, default=0.0)
    g.add_argument("--p-shift", type=float, default=0.0)
    g.add_argument("--sigma", type=float, default=5.0)
    g.add_argument("--shift", type=int, default=4)
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--out", required=True, help="output IVC1 container")
    g.add_argument("--truth", required=True, help="ground-truth JSON path")
    g.add_argument("--out-manifest", help="default: container path with .mf suffix")

    r = sub.add_parser(
        "report", parents=[common],
        help="rebuild a report from saved match lists",
    )
    r.add_argument("--matches", required=True)
    r.add_argument("--baseline")
    r.add_argument("--rule", default="percentile:99.5")
    r.add_argument("--histogram-bins", type=int, default=50)
    r.add_argument("--format", choices=["json", "csv"], default="json")
    r.add_argument("--out")

    return parser


_COMMANDS = {
    "preprocess": _cmd_preprocess,
    "audit": _cmd_audit,
    "metrics": _cmd_metrics,
    "plant": _cmd_plant,
    "report": _cmd_report,
}


def _resolve_workers(flag_value: Optional[int]) -> int:
    if flag_value is not None:
        return flag_value
    env = os.environ.get("MEMAUDIT_WORKERS")
    if env:
        try:
            return int(env)
        except ValueError:
            raise UsageError(f"MEMAUDIT_WORKERS must be an integer, got {env!r}")
    return 1


def run(argv) -> int:
    """Parse argv, dispatch, and map failures to exit codes."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse already printed the message
        return int(exc.code or 0)
    try:
        cfg = RunConfig(
            workers=_resolve_workers(args.workers),
            quiet=args.quiet,
            log_level=args.log_level,
            progress_interval=args.progress_interval,
        )
        logging.basicConfig(level=getattr(logging, cfg.log_level.upper()))
        return _COMMANDS[args.command](args, cfg)
    except UsageError as exc:
        print(f"memaudit {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except MemauditError as exc:
        print(f"memaudit {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"memaudit {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA


def main() -> None:
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
