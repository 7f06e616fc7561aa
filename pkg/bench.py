#!/usr/bin/env python3
"""
Measurement harness: storage overhead, proof and update sizes, per-phase
timings and spot-check detection rates for DSCS I and DSCS II.

Every run talks to its own in-process :class:`storage_service.StorageService`
through the real wire codec, so byte counts match what a socket would carry.
Timings use the monotonic clock; the first run is a warm-up and is dropped.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import random
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
from tqdm import tqdm

import dscs1
import dscs2
from audit_cli import (
    ClientState,
    append_block,
    audit_file,
    outsource_file,
    update_block,
)
from auth_skiplist import UpdateType
from crypto_core import SECURITY_PROFILES, FileLayout, get_profile
from errors import ConfigError
from storage_service import CorruptFractionBehavior, ServerBehavior, StorageClient, StorageService
from wire import MessageType, Protocol, ReadReply, UpdateRequest, UploadRequest, WireMessage

# Configure module logger
logger = logging.getLogger(__name__)

PHASES = ("outsource", "challenge", "prove", "verify", "update")
OUTPUT_FORMATS = ("table", "csv", "json")
ROW_FORMATS = ("csv", "json")


def detection_probability(beta: float, l: int) -> float:
    """Chance that l spot checks hit at least one of a beta fraction of bad blocks."""
    if not 0.0 <= beta <= 1.0:
        raise ValueError(f"beta must lie in [0, 1] (got {beta})")
    if l < 1:
        raise ValueError(f"l must be at least 1 (got {l})")
    return 1.0 - (1.0 - beta) ** l


def binomial_sigma(p: float, trials: int) -> float:
    return math.sqrt(p * (1.0 - p) / trials)


def monte_carlo_detection(
    m: int,
    beta: float,
    l: int,
    trials: int,
    seed: Optional[int] = None,
) -> float:
    """
    Fraction of simulated audits that catch corruption.

    Each trial corrupts every block independently with probability beta and
    challenges l distinct blocks.
    """
    if not 1 <= l <= m:
        raise ValueError(f"Challenge size {l} outside [1, {m}]")
    if trials < 1:
        raise ValueError("Need at least one trial")
    generator = np.random.default_rng(seed)
    corrupted = generator.random((trials, m)) < beta
    challenged = np.argsort(generator.random((trials, m)), axis=1)[:, :l]
    hits = np.take_along_axis(corrupted, challenged, axis=1).any(axis=1)
    return float(hits.mean())


@dataclass
class BenchConfig:
    protocol: str = "dscs1"
    profile: str = "test"
    file_size: int = 64 * 1024
    block_size: int = 4096
    l: int = 10
    beta: float = 0.0
    trials: int = 50
    seed: Optional[int] = None
    progress: bool = True

    @property
    def segment_bytes(self) -> int:
        return get_profile(self.profile).segment_bytes

    @property
    def n(self) -> int:
        return self.block_size // self.segment_bytes

    @property
    def m(self) -> int:
        return FileLayout(self.segment_bytes, self.n).block_count(self.file_size)

    def validate(self) -> None:
        Protocol.from_name(self.protocol)
        get_profile(self.profile)
        if self.block_size < self.segment_bytes or self.block_size % self.segment_bytes:
            raise ConfigError(
                f"Block size {self.block_size} is not a multiple of the {self.segment_bytes}-byte segment"
            )
        if self.file_size < 0:
            raise ConfigError("File size cannot be negative")
        if not 0.0 <= self.beta <= 1.0:
            raise ConfigError(f"beta must lie in [0, 1] (got {self.beta})")
        if not 1 <= self.l <= self.m:
            raise ConfigError(f"l={self.l} outside [1, {self.m}] for a {self.m}-block file")
        if self.trials < 1:
            raise ConfigError("trials must be at least 1")


@dataclass
class PhaseTiming:
    mean_ms: float
    median_ms: float


@dataclass
class BenchReport:
    protocol: str
    profile: str
    file_size: int
    block_size: int
    m: int
    l: int
    beta: float
    trials: int
    storage_overhead_pct: float
    skiplist_overhead_pct: float
    tag_overhead_pct: float
    proof_bytes: float
    proof_bytes_spread: int
    update_bytes: float
    timings: Dict[str, PhaseTiming] = field(default_factory=dict)
    empirical_detection_rate: float = 0.0
    expected_detection_rate: float = 0.0

    def rows(self) -> List[Dict[str, object]]:
        """Flat (metric, value) rows for CSV output."""
        rows: List[Dict[str, object]] = []
        for key, value in asdict(self).items():
            if key == "timings":
                continue
            rows.append({"metric": key, "value": value})
        for phase, timing in self.timings.items():
            rows.append({"metric": f"{phase}_mean_ms", "value": round(timing.mean_ms, 4)})
            rows.append({"metric": f"{phase}_median_ms", "value": round(timing.median_ms, 4)})
        return rows


class MeteredTransport:
    """Wraps a transport and counts payload bytes, leaving out raw block data."""

    def __init__(self, inner: Callable[[WireMessage], WireMessage]):
        self.inner = inner
        self.bytes = 0

    def reset(self) -> None:
        self.bytes = 0

    def __call__(self, message: WireMessage) -> WireMessage:
        reply = self.inner(message)
        sent = len(message.payload)
        if message.msg_type == MessageType.UPDATE:
            request = UpdateRequest.parse(message.payload)
            sent -= len(request.block or b"")
        received = len(reply.payload)
        if message.msg_type == MessageType.READ and not reply.is_error:
            received -= len(ReadReply.parse(reply.payload).block)
        self.bytes += sent + received
        return reply


def _keygen(config: BenchConfig, rng: random.Random) -> ClientState:
    profile = get_profile(config.profile)
    if Protocol.from_name(config.protocol) is Protocol.DSCS1:
        return dscs1.keygen(profile, config.m, config.n, rng)
    return dscs2.keygen2(profile, 0, config.n, rng)


def _timed(samples: List[float], action: Callable[[], object]) -> object:
    start = time.perf_counter()
    result = action()
    samples.append((time.perf_counter() - start) * 1000.0)
    return result


def _summary(samples: Sequence[float]) -> PhaseTiming:
    values = np.asarray(samples, dtype=float)
    return PhaseTiming(mean_ms=float(values.mean()), median_ms=float(np.median(values)))


def _overhead_parts(service: StorageService, fid: bytes) -> Dict[str, float]:
    sizes = service.storage_overhead(fid)
    total = sizes["file_bytes"] or 1
    return {
        "skiplist": 100.0 * sizes["skiplist_bytes"] / total,
        "tags": 100.0 * (sizes["tag_bytes"] + sizes["h_list_bytes"]) / total,
    }


def _one_run(
    config: BenchConfig,
    state: ClientState,
    data: bytes,
    rng: random.Random,
    samples: Dict[str, List[float]],
) -> Dict[str, float]:
    service = StorageService()
    meter = MeteredTransport(service.dispatch)
    client = StorageClient(meter)
    layout = state.layout

    if isinstance(state, dscs1.ClientStateI):
        bundle = _timed(samples["outsource"], lambda: dscs1.outsource(data, state, rng=rng))
    else:
        bundle = _timed(samples["outsource"], lambda: dscs2.outsource2(data, state))
    request = UploadRequest(
        protocol=Protocol.from_name(config.protocol),
        segment_bytes=layout.segment_bytes,
        public_key=bundle.pk.to_bytes(),
        blocks=[layout.block_to_bytes(block) for block in bundle.blocks],
        tags=bundle.tags,
        skiplist=bundle.skiplist.to_bytes() if isinstance(bundle, dscs1.UploadBundleI) else b"",
    )
    client.upload(bundle.fid, request)
    record = service.record(bundle.fid)

    if isinstance(state, dscs1.ClientStateI):
        chal = _timed(samples["challenge"], lambda: dscs1.challenge(state.pk, config.l, rng))
    else:
        chal = _timed(samples["challenge"], lambda: dscs2.challenge2(state.m, config.l, state.pk, rng))
    proof = _timed(samples["prove"], lambda: service.handle_challenge(bundle.fid, chal))
    encoded = record.encode_proof(proof)
    if isinstance(state, dscs1.ClientStateI):
        accepted = _timed(samples["verify"], lambda: dscs1.verify_audit(
            chal, dscs1.StorageProofI.from_bytes(encoded)[0], state.pk))
    else:
        accepted = _timed(samples["verify"], lambda: dscs2.verify_audit2(
            chal, dscs2.StorageProofII.from_bytes(encoded, state.pk.suite)[0], state.pk, state.fid, state.m))
    if not accepted:
        raise RuntimeError("Honest audit was rejected during the benchmark")

    new_block = tuple(rng.randrange(1 << (8 * layout.segment_bytes)) for _ in range(layout.n))
    meter.reset()
    if isinstance(state, dscs1.ClientStateI):
        index = rng.randint(1, state.pk.m)
        updated = _timed(samples["update"], lambda: update_block(
            client, state, UpdateType.MODIFY, index, new_block, rng))
    else:
        updated = _timed(samples["update"], lambda: append_block(client, state, new_block, rng))
    if not updated:
        raise RuntimeError("Honest update was rejected during the benchmark")

    parts = _overhead_parts(service, bundle.fid)
    return {
        "proof_bytes": float(len(encoded)),
        "update_bytes": float(meter.bytes),
        "skiplist_pct": parts["skiplist"],
        "tags_pct": parts["tags"],
    }


def measure_detection(config: BenchConfig, state: ClientState, data: bytes, rng: random.Random) -> float:
    """Audit a server that lost a beta fraction of blocks; return the rejection rate."""
    behavior: ServerBehavior = CorruptFractionBehavior(config.beta, random.Random(rng.getrandbits(64)))
    service = StorageService(behavior=behavior)
    client = StorageClient(service.dispatch)
    outsource_file(client, state, data, rng=rng)
    rejected = 0
    for _ in tqdm(range(config.trials), desc="detection", disable=not config.progress, leave=False):
        rejected += not audit_file(client, state, config.l, rng).accepted
    return rejected / config.trials


def run_bench(config: BenchConfig) -> BenchReport:
    config.validate()
    rng = random.Random(config.seed)
    state = _keygen(config, rng)
    data = bytes(rng.getrandbits(8) for _ in range(config.file_size))
    samples: Dict[str, List[float]] = {phase: [] for phase in PHASES}
    results: List[Dict[str, float]] = []

    runs = tqdm(range(config.trials + 1), desc=f"{config.protocol} bench", disable=not config.progress)
    for run in runs:
        outcome = _one_run(config, state, data, rng, samples)
        if run == 0:
            # warm-up
            for values in samples.values():
                values.clear()
            continue
        results.append(outcome)

    proof_sizes = np.array([r["proof_bytes"] for r in results])
    skiplist_pct = float(np.mean([r["skiplist_pct"] for r in results]))
    tags_pct = float(np.mean([r["tags_pct"] for r in results]))
    detection = measure_detection(config, state, data, rng)
    report = BenchReport(
        protocol=config.protocol,
        profile=config.profile,
        file_size=config.file_size,
        block_size=config.block_size,
        m=config.m,
        l=config.l,
        beta=config.beta,
        trials=config.trials,
        storage_overhead_pct=skiplist_pct + tags_pct,
        skiplist_overhead_pct=skiplist_pct,
        tag_overhead_pct=tags_pct,
        proof_bytes=float(proof_sizes.mean()),
        proof_bytes_spread=int(proof_sizes.max() - proof_sizes.min()),
        update_bytes=float(np.mean([r["update_bytes"] for r in results])),
        timings={phase: _summary(values) for phase, values in samples.items()},
        empirical_detection_rate=detection,
        expected_detection_rate=detection_probability(config.beta, config.l),
    )
    logger.info(
        f"Bench {config.protocol}: overhead {report.storage_overhead_pct:.2f}%, "
        f"proof {report.proof_bytes:.0f} B, detection {detection:.3f}"
    )
    return report


@dataclass
class TrendReport:
    protocol: str
    ms: List[int]
    proof_bytes: List[float]
    slope: float
    intercept: float
    max_relative_residual: float


def proof_size_trend(
    ms: Sequence[int],
    protocol: str = "dscs1",
    profile: str = "test",
    l: int = 4,
    rounds: int = 3,
    seed: Optional[int] = None,
) -> TrendReport:
    """
    Mean audit proof bytes for files of m one-segment blocks, fitted with a
    least-squares line against log2 m.
    """
    rng = random.Random(seed)
    settings = get_profile(profile)
    sizes: List[float] = []
    for m in ms:
        if m < l:
            raise ValueError(f"m={m} is smaller than l={l}")
        layout = FileLayout(settings.segment_bytes, 1)
        data = bytes(rng.getrandbits(8) for _ in range(m * layout.block_bytes - 8))
        measured = []
        if Protocol.from_name(protocol) is Protocol.DSCS1:
            state = dscs1.keygen(settings, 1, 1, rng)
            server = dscs1.ServerFileI.from_bundle(dscs1.outsource(data, state, rng=rng))
            for _ in range(rounds):
                chal = dscs1.challenge(state.pk, l, rng)
                measured.append(len(server.prove(chal).to_bytes(state.pk)))
        else:
            state2 = dscs2.keygen2(settings, 0, 1, rng)
            server2 = dscs2.ServerFileII.from_bundle(dscs2.outsource2(data, state2))
            for _ in range(rounds):
                chal = dscs2.challenge2(state2.m, l, state2.pk, rng)
                measured.append(len(server2.prove2(chal).to_bytes(state2.pk.suite)))
        sizes.append(float(np.mean(measured)))
        logger.debug(f"m={m}: mean proof {sizes[-1]:.1f} B")

    x = np.log2(np.asarray(ms, dtype=float))
    y = np.asarray(sizes)
    slope, intercept = np.polyfit(x, y, 1) if len(ms) > 1 else (0.0, float(y[0]))
    residuals = np.abs(y - (slope * x + intercept)) / y
    return TrendReport(
        protocol=protocol,
        ms=list(ms),
        proof_bytes=sizes,
        slope=float(slope),
        intercept=float(intercept),
        max_relative_residual=float(residuals.max()),
    )


def format_report(report: BenchReport, out: str = "table") -> str:
    if out == "json":
        return json.dumps(asdict(report), indent=2)
    if out == "csv":
        buffer = io.StringIO()
        writer = csv.DictWriter(buffer, fieldnames=["metric", "value"])
        writer.writeheader()
        writer.writerows(report.rows())
        return buffer.getvalue()
    if out != "table":
        raise ConfigError(f"Unknown output format '{out}'")
    lines = [
        f"{report.protocol} / {report.profile}: {report.file_size} B file, "
        f"{report.block_size} B blocks, m={report.m}, l={report.l}, {report.trials} runs",
        "",
        f"  storage overhead     {report.storage_overhead_pct:8.2f} %"
        f"   (skip list {report.skiplist_overhead_pct:.2f} %, tags {report.tag_overhead_pct:.2f} %)",
        f"  audit proof          {report.proof_bytes:8.0f} B   (spread {report.proof_bytes_spread} B)",
        f"  update traffic       {report.update_bytes:8.0f} B   (blocks excluded)",
        f"  detection (beta={report.beta:g})  {report.empirical_detection_rate:.3f}"
        f"   (formula {report.expected_detection_rate:.3f})",
        "",
        f"  {'phase':<12}{'mean ms':>12}{'median ms':>12}",
    ]
    for phase, timing in report.timings.items():
        lines.append(f"  {phase:<12}{timing.mean_ms:>12.3f}{timing.median_ms:>12.3f}")
    return "\n".join(lines)


def format_trend(trend: TrendReport) -> str:
    lines = [f"{trend.protocol} proof size vs m (fit: {trend.slope:.1f} * log2 m + {trend.intercept:.1f})"]
    for m, size in zip(trend.ms, trend.proof_bytes):
        lines.append(f"  m={m:<8}{size:10.1f} B")
    lines.append(f"  max relative residual {trend.max_relative_residual:.3%}")
    return "\n".join(lines)


def parse_args(argv: Optional[Sequence[str]] = None) -> argparse.Namespace:
    parser = argparse.ArgumentParser(description="Benchmark DSCS I and DSCS II at desk scale.")
    parser.add_argument("--protocol", choices=[p.label for p in Protocol], default="dscs1")
    parser.add_argument("--profile", choices=sorted(SECURITY_PROFILES), default="test")
    parser.add_argument("--file-size", type=int, default=64 * 1024, help="File size in bytes (default: 65536).")
    parser.add_argument("--block-size", type=int, default=4096, help="Block size in bytes (default: 4096).")
    parser.add_argument("--l", type=int, default=10, help="Challenged blocks per audit (default: 10).")
    parser.add_argument("--beta", type=float, default=0.0, help="Fraction of blocks the server loses.")
    parser.add_argument("--trials", type=int, default=50, help="Measured runs and detection audits (default: 50).")
    parser.add_argument("--seed", type=int, help="Seed for reproducible runs.")
    parser.add_argument("--rows", choices=ROW_FORMATS, default="csv", help="Format of the machine-readable rows (default: csv).")
    parser.add_argument("--rows-file", type=Path, help="Write the rows here instead of after the table on stdout.")
    parser.add_argument("--trend", help="Comma-separated m values for a proof-size trend, e.g. 16,256,4096.")
    parser.add_argument("--no-progress", action="store_true", help="Hide progress bars.")
    parser.add_argument("--log-file", default="dscs-bench.log", help="Log file.")
    parser.add_argument("--log-level", default="INFO", help="Logging level.")
    return parser.parse_args(argv)


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = parse_args(argv)

    # Configure logging
    logging.basicConfig(
        level=getattr(logging, args.log_level.upper(), logging.INFO),
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        handlers=[
            logging.FileHandler(args.log_file),
            logging.StreamHandler()
        ]
    )

    config = BenchConfig(
        protocol=args.protocol,
        profile=args.profile,
        file_size=args.file_size,
        block_size=args.block_size,
        l=args.l,
        beta=args.beta,
        trials=args.trials,
        seed=args.seed,
        progress=not args.no_progress,
    )
    try:
        report = run_bench(config)
        print(format_report(report, "table"))
        rows = format_report(report, args.rows)
        if args.rows_file:
            args.rows_file.write_text(rows)
            logger.info(f"Wrote {args.rows} rows to {args.rows_file}")
        else:
            print()
            print(rows)
        if args.trend:
            ms = [int(value) for value in args.trend.split(",") if value.strip()]
            print(format_trend(proof_size_trend(ms, args.protocol, args.profile, seed=args.seed)))
        return 0
    except (ConfigError, ValueError) as exc:
        print(f"Error: {exc}", file=sys.stderr)
        return 2
    except Exception as e:
        logger.critical(f"Fatal error: {e}", exc_info=True)
        return 1


if __name__ == "__main__":
    sys.exit(main())
