"""Command-line entry point: one binary, one subcommand per pipeline stage.

Exit codes: 0 ok, 1 usage error, 2 data error (missing/invalid inputs,
format or digest mismatches), 3 self-test failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .audio import load_wav, resample, write_wav
from .config import RunConfig, feature_digest
from .degrade import AssetStore, degrade_chain, random_plan, validate_partition
from .encoder import EncoderParams, load_checkpoint, save_checkpoint
from .evaluate import (
    QuerySpec,
    make_queries,
    run_identification,
    score,
    sequence_queries,
    extract_fingerprints,
)
from .index import FingerprintDB, IvfIndex, build_db, build_ivf, sequence_search
from .training import train

__all__ = ["main"]


class _Parser(argparse.ArgumentParser):
    """argparse variant that exits 1 (not 2) on usage errors."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _load_corpus(directory, rate):
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"no such directory: {directory}")
    tracks = {}
    for path in sorted(directory.glob("*.wav")):
        buf = load_wav(path)
        if buf.sample_rate != rate:
            buf = resample(buf, rate)
        tracks[path.stem] = buf
    if not tracks:
        raise ValueError(f"no .wav files in {directory}")
    return tracks


def _check_digest(db: FingerprintDB, cfg: RunConfig, what: str) -> None:
    if db.config_digest != cfg.feature_digest():
        raise ValueError(
            f"feature-config digest mismatch between {what} and the run config; "
            "refusing to compare fingerprints extracted with different settings"
        )


def _warn_partition(assets: AssetStore) -> None:
    violations = validate_partition(assets.partition_manifest())
    if violations:
        print(
            f"warning: {len(violations)} asset source(s) appear in both splits: "
            + ", ".join(violations),
            file=sys.stderr,
        )


def cmd_degrade(args) -> int:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    rate = cfg.mel.sample_rate
    assets = AssetStore.from_manifest(args.manifest, rate)
    _warn_partition(assets)
    rng = np.random.default_rng(args.plan_seed)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    noise_ids = assets.ids("noise", args.split)
    room_ids = assets.ids("room", args.split)
    mic_ids = assets.ids("microphone", args.split)
    truncate = None if args.full_ir else args.truncate_ir
    plans = {}
    for path in sorted(Path(args.input).glob("*.wav")):
        buf = load_wav(path)
        if buf.sample_rate != rate:
            buf = resample(buf, rate)
        plan = random_plan(
            rng, noise_ids, room_ids, mic_ids,
            (args.snr_low, args.snr_high), (args.gain_low, args.gain_high),
        )
        meta = {}
        degraded = degrade_chain(buf, plan, assets, ir_truncate_s=truncate, meta=meta)
        write_wav(out_dir / path.name, degraded)
        plans[path.name] = {"plan": plan.to_dict(), **meta}
    if not plans:
        raise ValueError(f"no .wav files in {args.input}")
    (out_dir / "plans.json").write_text(json.dumps(plans, indent=2, sort_keys=True))
    print(f"degraded {len(plans)} file(s) -> {out_dir}")
    return 0


def cmd_extract(args) -> int:
    cfg = RunConfig.load(args.config)
    params, _header = load_checkpoint(args.checkpoint)
    tracks = _load_corpus(args.input, cfg.mel.sample_rate)
    per_track = (
        (tid, extract_fingerprints(buf, params, cfg.mel, cfg.segment))
        for tid, buf in tracks.items()
    )
    db = build_db(per_track, cfg.feature_digest())
    db.save(args.out)
    print(f"extracted {db.count} fingerprints from {len(tracks)} track(s) -> {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = RunConfig.load(args.config)
    assets = AssetStore.from_manifest(args.manifest, cfg.mel.sample_rate)
    _warn_partition(assets)
    corpus = _load_corpus(args.corpus, cfg.mel.sample_rate)
    result = train(corpus, assets, cfg.train, cfg.mel, cfg.segment,
                   loss_csv_path=args.loss_csv)
    save_checkpoint(
        args.out,
        result.params,
        {"run_config": json.loads(cfg.to_json()), "seed": cfg.train.seed},
    )
    print(
        f"trained {len(result.loss_curve)} step(s); "
        f"loss {result.loss_curve[0]:.4f} -> {result.loss_curve[-1]:.4f}; "
        f"checkpoint -> {args.out}"
    )
    return 0


def cmd_index(args) -> int:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    db = FingerprintDB.load(args.db)
    nlist = args.nlist or cfg.index.nlist
    index = build_ivf(db, nlist=nlist, seed=args.seed)
    index.save(args.out)
    print(f"built IVF index: {nlist} list(s) over {db.count} rows -> {args.out}")
    return 0


def cmd_search(args) -> int:
    cfg = RunConfig.load(args.config)
    db = FingerprintDB.load(args.db, mmap=True)
    _check_digest(db, cfg, "the database")
    index = IvfIndex.load(args.index)
    params, _ = load_checkpoint(args.checkpoint)
    query = load_wav(args.query)
    if query.sample_rate != cfg.mel.sample_rate:
        query = resample(query, cfg.mel.sample_rate)
    fp = extract_fingerprints(query, params, cfg.mel, cfg.segment)
    results = sequence_search(index, db, fp, k=args.k or cfg.index.k,
                              nprobe=args.nprobe or cfg.index.nprobe)
    for rank, r in enumerate(results[: args.top], start=1):
        start, _ = db.track_range(r.track_id)
        print(
            f"{rank:>3}. {r.track_id}  segment {r.db_start_index - start}  "
            f"score {r.mean_similarity:.4f}"
        )
    if not results:
        print("no candidates")
    return 0


def cmd_make_queries(args) -> int:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    rate = cfg.mel.sample_rate
    assets = AssetStore.from_manifest(args.manifest, rate)
    tracks = _load_corpus(args.corpus, rate)
    chunks = make_queries(
        tracks, assets, QuerySpec(chunk_s=args.chunk_s), seed=args.seed,
        seg_spec=cfg.segment, split=args.split,
    )
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    truth = {}
    for chunk in chunks:
        name = f"{chunk.track_id}.wav"
        write_wav(out_dir / name, chunk.audio)
        truth[name] = {"track_id": chunk.track_id, "chunk_segment0": chunk.chunk_segment0}
    (out_dir / "truth.json").write_text(json.dumps(truth, indent=2, sort_keys=True))
    print(f"wrote {len(chunks)} query chunk(s) -> {out_dir}")
    return 0


def cmd_evaluate(args) -> int:
    from .evaluate import GroundTruth, QueryChunk  # local: only used here

    cfg = RunConfig.load(args.config)
    db = FingerprintDB.load(args.db, mmap=True)
    _check_digest(db, cfg, "the database")
    index = IvfIndex.load(args.index)
    params, _ = load_checkpoint(args.checkpoint)

    qdir = Path(args.queries)
    truth_path = qdir / "truth.json"
    if not truth_path.is_file():
        raise FileNotFoundError(f"missing ground truth file {truth_path}")
    truth = json.loads(truth_path.read_text())
    chunks = []
    for name, info in sorted(truth.items()):
        buf = load_wav(qdir / name)
        if buf.sample_rate != cfg.mel.sample_rate:
            buf = resample(buf, cfg.mel.sample_rate)
        chunks.append(QueryChunk(info["track_id"], buf, int(info["chunk_segment0"])))

    lengths = tuple(int(x) for x in args.lengths.split(","))
    qspec = QuerySpec(seq_lengths=lengths, n_start_indices=args.n_start_indices)
    queries = sequence_queries(chunks, params, cfg.mel, cfg.segment, qspec)
    results = {
        length: run_identification(index, db, qs, k=cfg.index.k, nprobe=cfg.index.nprobe)
        for length, qs in queries.items()
    }
    report = score(results, queries, db, hop_s=args.hop)
    if args.out:
        Path(args.out).write_text(report.to_json())
    print(report.format_table(hop_s=args.hop))
    return 0


def _selftest_losses() -> list[tuple[str, bool, str]]:
    from .losses import (
        LossConfig,
        align_uniform_loss,
        dcl_loss,
        kcl_loss,
        ntxent_loss,
        triplet_loss,
    )
    from .losses import EmbeddingBatch

    def random_batch(n_anchors, n_ppa, dim, seed):
        rng = np.random.default_rng(seed)
        x = rng.normal(0, 1, (n_anchors * (1 + n_ppa), dim))
        x /= np.linalg.norm(x, axis=1, keepdims=True)
        return EmbeddingBatch(x, n_anchors, n_ppa, [f"t{i}" for i in range(n_anchors)])

    def fd_check(fn, batch, cfg, h=1e-6):
        analytic = fn(batch, cfg).gradient
        fd = np.zeros_like(batch.vectors)
        for i in range(batch.vectors.shape[0]):
            for j in range(batch.vectors.shape[1]):
                plus = batch.vectors.copy()
                plus[i, j] += h
                minus = batch.vectors.copy()
                minus[i, j] -= h
                up = fn(EmbeddingBatch(plus, batch.n_anchors, batch.n_pos_per_anchor), cfg).value
                dn = fn(EmbeddingBatch(minus, batch.n_anchors, batch.n_pos_per_anchor), cfg).value
                fd[i, j] = (up - dn) / (2 * h)
        scale = max(np.max(np.abs(fd)), 1e-8)
        return float(np.max(np.abs(analytic - fd)) / scale)

    cases = [
        ("triplet", triplet_loss, LossConfig(kind="triplet"), 2),
        ("ntxent", ntxent_loss, LossConfig(kind="ntxent"), 1),
        ("ntxent-multipos", ntxent_loss, LossConfig(kind="ntxent"), 2),
        ("dcl", dcl_loss, LossConfig(kind="dcl"), 1),
        ("align-uniform", align_uniform_loss, LossConfig(kind="align_uniform"), 1),
        ("kcl", kcl_loss, LossConfig(kind="kcl"), 1),
    ]
    outcomes = []
    for name, fn, cfg, n_ppa in cases:
        worst = max(
            fd_check(fn, random_batch(n_a, n_ppa, dim, seed=n_a * 10 + dim), cfg)
            for n_a in (2, 4)
            for dim in (3, 8)
        )
        outcomes.append((f"gradient {name}", worst < 1e-4, f"max rel err {worst:.2e}"))
    return outcomes


def _selftest_encoder() -> list[tuple[str, bool, str]]:
    from .encoder import backward, forward, forward_with_cache

    params = EncoderParams.init([10, 8, 4], np.random.default_rng(0), dtype=np.float64)
    rng = np.random.default_rng(1)
    x = rng.normal(0, 1, (3, 10))
    c = rng.normal(0, 1, (3, 4))
    _, cache = forward_with_cache(params, x)
    grad_w, grad_b = backward(params, cache, c)
    h = 1e-6
    worst = 0.0
    for arrs, grads in ((params.weights, grad_w), (params.biases, grad_b)):
        for li in range(len(arrs)):
            it = np.nditer(arrs[li], flags=["multi_index"])
            while not it.finished:
                idx = it.multi_index
                orig = arrs[li][idx]
                arrs[li][idx] = orig + h
                up = float(np.sum(c * forward(params, x)))
                arrs[li][idx] = orig - h
                dn = float(np.sum(c * forward(params, x)))
                arrs[li][idx] = orig
                fd = (up - dn) / (2 * h)
                worst = max(worst, abs(grads[li][idx] - fd) / max(abs(fd), 1e-8))
                it.iternext()
    return [("gradient encoder-backward", worst < 1e-4, f"max rel err {worst:.2e}")]


def _selftest_oracles() -> list[tuple[str, bool, str]]:
    from .audio import AudioBuffer
    from .degrade import ImpulseResponse, convolve_with_history, mix_noise

    rng = np.random.default_rng(2)
    worst_snr = 0.0
    for _ in range(100):
        sig = AudioBuffer(rng.normal(0, 0.3, 8000).astype(np.float32), 8000)
        noise = AudioBuffer(rng.normal(0, 0.3, 16000).astype(np.float32), 8000)
        target = float(rng.uniform(0, 10))
        mixed = mix_noise(sig, noise, target, np.random.default_rng(3))
        resid = mixed.samples.astype(np.float64) - sig.samples.astype(np.float64)
        got = 10 * np.log10(np.mean(sig.samples.astype(np.float64) ** 2) / np.mean(resid**2))
        worst_snr = max(worst_snr, abs(got - target))
    outcomes = [("snr calibration", worst_snr < 1e-6, f"max |err| {worst_snr:.2e} dB")]

    worst_conv = 0.0
    for trial in range(20):
        sig = AudioBuffer(rng.normal(0, 0.3, 3 * 8000).astype(np.float32), 8000)
        n_ir = int(rng.integers(64, 2400))
        h = (rng.normal(0, 1, n_ir) * np.exp(-np.arange(n_ir) / 500)).astype(np.float32)
        ir = ImpulseResponse(h / np.linalg.norm(h), 8000, "room", f"r{trial}")
        start = int(rng.integers(8000, 2 * 8000))
        out = convolve_with_history(sig, start, 8000, 1.0, ir)
        whole = np.convolve(sig.samples.astype(np.float64), ir.samples.astype(np.float64))
        worst_conv = max(worst_conv, float(np.max(np.abs(out.samples - whole[start : start + 8000]))))
    outcomes.append(("past-reverberation equivalence", worst_conv < 1e-5,
                     f"max |err| {worst_conv:.2e}"))
    return outcomes


def cmd_selftest(_args) -> int:
    outcomes = _selftest_losses() + _selftest_encoder() + _selftest_oracles()
    failed = False
    for name, ok, detail in outcomes:
        print(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
        failed = failed or not ok
    return 3 if failed else 0


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="audiofp", description=__doc__)
    parser.add_argument("--threads", type=int, default=None,
                        help="advisory worker count (computation is single-process)")
    parser.add_argument("--deterministic", action="store_true",
                        help="force single-threaded batch production (always on here)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("degrade", help="degrade WAV files through the noise/IR chain")
    p.add_argument("--manifest", required=True)
    p.add_argument("--plan-seed", type=int, required=True)
    p.add_argument("--snr-low", type=float, default=0.0)
    p.add_argument("--snr-high", type=float, default=10.0)
    p.add_argument("--gain-low", type=float, default=-6.0)
    p.add_argument("--gain-high", type=float, default=0.0)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="test", choices=["train", "test"])
    group = p.add_mutually_exclusive_group()
    group.add_argument("--full-ir", action="store_true", help="use full IR durations")
    group.add_argument("--truncate-ir", type=float, default=1.0, metavar="SECONDS")
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_degrade)

    p = sub.add_parser("extract", help="extract fingerprints into a database file")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("train", help="train the fingerprint encoder")
    p.add_argument("--corpus", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--loss-csv", default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("index", help="build an IVF index over a database")
    p.add_argument("--db", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--nlist", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_index)

    p = sub.add_parser("search", help="identify one query WAV against a database")
    p.add_argument("--db", required=True)
    p.add_argument("--index", required=True)
    p.add_argument("--query", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--nprobe", type=int, default=None)
    p.add_argument("--top", type=int, default=5)
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("make-queries", help="generate degraded evaluation query chunks")
    p.add_argument("--corpus", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--chunk-s", type=float, default=30.0)
    p.add_argument("--split", default="test", choices=["train", "test"])
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_make_queries)

    p = sub.add_parser("evaluate", help="score identification over a query set")
    p.add_argument("--db", required=True)
    p.add_argument("--index", required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--lengths", default="1,3,9,19")
    p.add_argument("--hop", type=float, default=0.5)
    p.add_argument("--n-start-indices", type=int, default=6)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("selftest", help="run gradient and oracle self-checks")
    p.set_defaults(func=cmd_selftest)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.func(args)
    except (FileNotFoundError, ValueError, KeyError, RuntimeError) as e:
        print(f"audiofp: error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
