"""``gpq`` command-line front end.

Commands: ``synth``, ``split``, ``train``, ``build``, ``query``, ``eval``.
Every command writes a ``<output>.manifest.json`` next to its main output.

Exit codes: 0 ok, 2 usage, 3 io or corrupt file, 4 training divergence,
5 shape mismatch.

numpy (and therefore every compute module) is imported lazily so that
``GPQ_THREADS`` can cap BLAS threads before the library loads.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import subprocess
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

from . import __version__

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_DIVERGED, EXIT_SHAPE = 0, 2, 3, 4, 5
BIT_CHOICES = (12, 24, 32, 48)
_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")

log = logging.getLogger("gpq.cli")


class UsageError(Exception):
    pass


# ---------------------------------------------------------------- manifest


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def describe_version() -> str:
    """``git describe`` of the source tree, or the package version."""
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            cwd=Path(__file__).resolve().parent,
            capture_output=True,
            text=True,
            timeout=5,
        )
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


@dataclass
class RunManifest:
    command: str
    config: dict
    seeds: dict
    inputs: dict = field(default_factory=dict)
    outputs: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)
    version: str = field(default_factory=describe_version)

    def add_output(self, path) -> None:
        path = Path(path)
        self.outputs[str(path)] = {"size": path.stat().st_size, "sha256": _sha256(path)}

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    def write(self, primary_output) -> Path:
        path = manifest_path(primary_output)
        path.write_text(self.to_json())
        return path

    @classmethod
    def load(cls, path) -> "RunManifest":
        return cls(**json.loads(Path(path).read_text()))


def manifest_path(output) -> Path:
    output = Path(output)
    return output.with_name(output.name + ".manifest.json")


def validate_manifest(manifest: RunManifest) -> list[str]:
    """Problems found when checking recorded outputs against disk; empty if valid."""
    problems = []
    for path, meta in manifest.outputs.items():
        p = Path(path)
        if not p.exists():
            problems.append(f"{path}: missing")
            continue
        if p.stat().st_size != meta["size"]:
            problems.append(f"{path}: size {p.stat().st_size} != {meta['size']}")
        elif _sha256(p) != meta["sha256"]:
            problems.append(f"{path}: sha256 differs")
    return problems


class _Timer:
    def __init__(self, manifest: RunManifest):
        self.manifest = manifest

    def __call__(self, phase: str):
        timer = self

        class _Phase:
            def __enter__(self):
                self.start = time.perf_counter()

            def __exit__(self, *exc):
                timer.manifest.timings[phase] = round(time.perf_counter() - self.start, 6)

        return _Phase()


# ---------------------------------------------------------------- commands


def _train_config(args):
    from .pipeline import bits_to_M
    from .trainer import TrainConfig

    if args.bits is not None:
        if args.K != 16:
            raise UsageError("--bits fixes K=16; use --M with --K for other codebook sizes")
        M = bits_to_M(args.bits, 16)
    else:
        M = args.M
    try:
        return TrainConfig(
            alpha=args.alpha,
            beta=args.beta,
            K=args.K,
            d=args.d,
            M=M,
            hidden=args.hidden,
            lambda1=args.lambda1,
            lambda2=args.lambda2,
            lr=args.lr,
            batch_size=args.batch_size,
            epochs=args.epochs,
            seed=args.seed,
            use_classifier=not (args.lambda1 == 0 and args.lambda2 == 0),
            proto_update_every_epoch=args.proto_update_every_epoch,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def cmd_synth(args) -> int:
    from .data import save, synth_gaussian_mixture
    from .errors import InvalidConfig

    manifest = RunManifest("synth", _flags(args), {"seed": args.seed})
    timer = _Timer(manifest)
    with timer("synth"):
        try:
            ds = synth_gaussian_mixture(args.classes, args.per_class, args.dim, args.spread, args.seed)
        except InvalidConfig as exc:
            raise UsageError(str(exc)) from exc
    with timer("write"):
        save(ds, args.out)
    manifest.add_output(args.out)
    manifest.write(args.out)
    print(f"wrote {args.out}: items={len(ds)} dim={ds.dim} classes={ds.n_classes}")
    return EXIT_OK


def cmd_split(args) -> int:
    from .data import load, split_protocol1, split_protocol2

    manifest = RunManifest("split", _flags(args), {"seed": args.seed}, inputs={"data": args.data})
    ds = load(args.data)
    if args.protocol == 1:
        split = split_protocol1(ds, args.labels_per_class, args.query_per_class, args.seed)
    else:
        split = split_protocol2(ds, args.seed)
    split.save(args.out)
    manifest.add_output(args.out)
    manifest.write(args.out)
    print(
        f"wrote {args.out}: labeled={len(split.labeled)} unlabeled={len(split.unlabeled)} "
        f"database={len(split.database)} query={len(split.query)}"
    )
    return EXIT_OK


def cmd_train(args) -> int:
    from .data import ProtocolSplit, load
    from .trainer import format_log, save_checkpoint, train

    config = _train_config(args)
    manifest = RunManifest(
        "train", config.as_dict(), {"seed": config.seed}, inputs={"data": args.data, "split": args.split}
    )
    timer = _Timer(manifest)
    with timer("load"):
        ds = load(args.data)
        split = ProtocolSplit.load(args.split)
    log_path = Path(args.log) if args.log else Path(str(args.out) + ".log")
    with open(log_path, "w") as log_fh:

        def on_epoch(entry, _state):
            log_fh.write(format_log([entry]))
            log_fh.flush()

        with timer("train"):
            raw = ds.features.astype("float64")
            state, _ = train(
                raw[split.labeled], ds.labels[split.labeled], raw[split.unlabeled], config, callback=on_epoch
            )
    with timer("write"):
        save_checkpoint(state, args.out)
    manifest.add_output(args.out)
    manifest.add_output(log_path)
    manifest.write(args.out)
    print(f"wrote {args.out}: M={config.M} K={config.K} bytes_per_code={config.subspace.code_bytes}")
    return EXIT_OK


def cmd_build(args) -> int:
    from .data import ProtocolSplit, load
    from .errors import ShapeMismatch
    from .index import build_index, save
    from .trainer import encode_features, load_checkpoint, update_codewords_from_prototypes

    manifest = RunManifest(
        "build",
        _flags(args),
        {},
        inputs={"model": args.model, "data": args.data, "split": args.split},
    )
    timer = _Timer(manifest)
    with timer("load"):
        state = load_checkpoint(args.model)
        ds = load(args.data)
        split = ProtocolSplit.load(args.split) if args.split else None
    if ds.dim != state.params.input_dim:
        raise ShapeMismatch(f"data dimension {ds.dim} != encoder input {state.params.input_dim}")
    ids = split.database if split is not None else ds.ids
    cb = state.codebook
    if args.proto_update:
        cb = update_codewords_from_prototypes(cb, state.prototypes, cb.alpha)
    with timer("build"):
        index = build_index(encode_features(state, ds.features[ids]), cb, ids=ids)
    save(index, args.out)
    manifest.add_output(args.out)
    manifest.write(args.out)
    print(f"wrote {args.out}: count={index.count} bytes_per_code={index.shape.code_bytes}")
    return EXIT_OK


def _read_vectors(path):
    import numpy as np

    from .errors import IoError

    try:
        rows = [line.replace(",", " ").split() for line in Path(path).read_text().splitlines()]
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    rows = [r for r in rows if r and not r[0].startswith("#")]
    return np.array([[float(v) for v in r] for r in rows], dtype=np.float64).reshape(len(rows), -1)


def _query_inputs(args):
    """Query ids and raw vectors from ``--vectors`` or ``--data`` with ``--ids``/``--split``."""
    import numpy as np

    from .data import ProtocolSplit, load

    if args.vectors:
        vectors = _read_vectors(args.vectors)
        return np.arange(len(vectors)), vectors
    if not args.data:
        raise UsageError("give --vectors or --data")
    ds = load(args.data)
    if args.ids:
        ids = np.array([int(v) for v in args.ids.split(",") if v.strip()], dtype=np.int64)
    elif args.split:
        ids = ProtocolSplit.load(args.split).query
    else:
        raise UsageError("--data needs --ids or --split")
    if ids.size and (ids.min() < 0 or ids.max() >= len(ds)):
        raise UsageError("query id outside the dataset")
    return ids, ds.features[ids].astype(np.float64)


def _to_index_space(vectors, state, shape):
    from .errors import ShapeMismatch
    from .numerics import intra_normalize

    if state is not None:
        if vectors.shape[1] != state.params.input_dim:
            raise ShapeMismatch(f"query dimension {vectors.shape[1]} != encoder input {state.params.input_dim}")
        from .trainer import encode_features

        return encode_features(state, vectors)
    if vectors.shape[1] != shape.D:
        raise ShapeMismatch(f"query dimension {vectors.shape[1]} != index dimension {shape.D}")
    return intra_normalize(vectors, shape)


def cmd_query(args) -> int:
    from .index import load, search_topk
    from .trainer import load_checkpoint

    index = load(args.index)
    state = load_checkpoint(args.model) if args.model else None
    ids, vectors = _query_inputs(args)
    feats = _to_index_space(vectors, state, index.shape)
    out = []
    for qid, q in zip(ids, feats):
        out.append(f"# query {int(qid)}")
        if index.count:
            for r, (item, score) in enumerate(search_topk(q, index, args.k), start=1):
                out.append(f"{r}\t{item}\t{score:.6f}")
    sys.stdout.write("\n".join(out) + ("\n" if out else ""))
    return EXIT_OK


def cmd_eval(args) -> int:
    from .data import ProtocolSplit, load
    from .errors import ShapeMismatch
    from .evaluation import RelevanceJudge, evaluate, format_report
    from .index import load as load_index
    from .pipeline import run_pq_baseline
    from .trainer import encode_features, load_checkpoint

    manifest = RunManifest(
        "eval",
        _flags(args),
        {"baseline_seed": args.seed},
        inputs={"model": args.model, "index": args.index, "data": args.data, "split": args.split},
    )
    timer = _Timer(manifest)
    with timer("load"):
        state = load_checkpoint(args.model)
        index = load_index(args.index)
        ds = load(args.data)
        split = ProtocolSplit.load(args.split)
    if ds.dim != state.params.input_dim:
        raise ShapeMismatch(f"data dimension {ds.dim} != encoder input {state.params.input_dim}")
    judge = RelevanceJudge(ds.labels, multi_label=ds.multi_label)
    with timer("eval"):
        queries = encode_features(state, ds.features[split.query])
        metrics = evaluate(queries, split.query, index, judge, cutoff=args.cutoff, precision_ks=args.k)
    if args.baseline == "pq":
        if ds.dim % index.shape.M:
            raise ShapeMismatch(f"raw dimension {ds.dim} is not divisible by M={index.shape.M}")
        with timer("baseline"):
            base = run_pq_baseline(ds, split, index.shape.M, index.shape.K, args.baseline_iterations, args.seed)
        metrics["map_baseline"] = base.metrics["map"]
    report = format_report(metrics)
    sys.stdout.write(report)
    if args.out:
        Path(args.out).write_text(report)
        manifest.add_output(args.out)
        manifest.write(args.out)
    return EXIT_OK


# ---------------------------------------------------------------- parsing


def _flags(args) -> dict:
    return {k: v for k, v in vars(args).items() if k not in ("func", "config")}


def _positive_int(text):
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gpq", description="Semi-supervised product quantization retrieval.")
    parser.add_argument("--version", action="version", version=f"gpq {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, func, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="key=value file; flags given on the command line take precedence")
        p.set_defaults(func=func)
        return p

    p = command("synth", cmd_synth, "write a synthetic Gaussian-mixture dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--per-class", type=int, default=600)
    p.add_argument("--dim", type=int, default=96)
    p.add_argument("--spread", type=float, default=0.15)
    p.add_argument("--seed", type=int, default=0)

    p = command("split", cmd_split, "split a dataset into labeled/unlabeled/database/query sets")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--protocol", type=int, choices=(1, 2), default=1)
    p.add_argument("--labels-per-class", type=int, default=50)
    p.add_argument("--query-per-class", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)

    p = command("train", cmd_train, "train encoder, codebook and prototypes")
    p.add_argument("--data", required=True)
    p.add_argument("--split", required=True)
    p.add_argument("--out", required=True, help="GPQM checkpoint path")
    p.add_argument("--log", help="per-epoch key=value log (default: <out>.log)")
    p.add_argument("--bits", type=int, choices=BIT_CHOICES, help="code length; sets M=bits/4 with K=16")
    p.add_argument("--M", type=_positive_int, default=8)
    p.add_argument("--K", type=_positive_int, default=16)
    p.add_argument("--d", type=_positive_int, default=12)
    p.add_argument("--hidden", type=_positive_int, default=128)
    p.add_argument("--alpha", type=float, default=20.0)
    p.add_argument("--beta", type=float, default=4.0)
    p.add_argument("--lambda1", type=float, default=0.1)
    p.add_argument("--lambda2", type=float, default=0.1)
    p.add_argument("--lr", type=float, default=2e-4)
    p.add_argument("--batch-size", type=_positive_int, default=64)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--proto-update-every-epoch", action="store_true")

    p = command("build", cmd_build, "encode the database and write a GPQI index")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", help="index only the database split (default: every item)")
    p.add_argument("--out", required=True)
    p.add_argument(
        "--proto-update",
        action=argparse.BooleanOptionalAction,
        default=False,
        help="pull codewords toward the class prototypes before encoding (default: off)",
    )

    p = command("query", cmd_query, "print the top-k items for each query")
    p.add_argument("--index", required=True)
    p.add_argument("--model", help="checkpoint used to encode raw query vectors")
    p.add_argument("--vectors", help="text file, one query vector per line")
    p.add_argument("--data")
    p.add_argument("--ids", help="comma-separated dataset ids to use as queries")
    p.add_argument("--split", help="use the split's query set")
    p.add_argument("--k", type=_positive_int, default=10)

    p = command("eval", cmd_eval, "report mAP of the query set against an index")
    p.add_argument("--model", required=True)
    p.add_argument("--index", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", required=True)
    p.add_argument("--k", type=_positive_int, action="append", default=[], help="also report precision@k")
    p.add_argument("--cutoff", type=_positive_int, help="truncate rankings for mAP")
    p.add_argument("--baseline", choices=("pq",))
    p.add_argument("--baseline-iterations", type=_positive_int, default=25)
    p.add_argument("--seed", type=int, default=0, help="baseline k-means seed")
    p.add_argument("--out", help="also write the report here")
    return parser


def read_config_file(path) -> dict[str, str]:
    """``key=value`` lines; ``#`` starts a comment. Dashes in keys become underscores."""
    values = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        values[key.replace("-", "_")] = value
    return values


def _subparser(parser, name):
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices.get(name)
    return None


def _install_config(sub: argparse.ArgumentParser, command: str, path) -> None:
    """Install the config file's values as defaults of one subcommand."""
    known = {a.dest: a for a in sub._actions}
    defaults = {}
    for key, value in read_config_file(path).items():
        action = known.get(key)
        if action is None or key in ("help", "config"):
            raise UsageError(f"unknown config key {key!r} for '{command}'")
        if isinstance(action, (argparse._StoreTrueAction, argparse.BooleanOptionalAction)):
            if value.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise UsageError(f"config key {key} expects a boolean")
            defaults[key] = value.lower() in ("true", "1", "yes")
        elif isinstance(action, argparse._AppendAction):
            defaults[key] = [action.type(v) if action.type else v for v in value.split(",")]
        else:
            # string defaults go through the action's type conversion
            defaults[key] = value
        action.required = False
    sub.set_defaults(**defaults)


def _configure_threads() -> None:
    threads = os.environ.get("GPQ_THREADS")
    if threads:
        for var in _THREAD_VARS:
            os.environ[var] = threads


def main(argv=None) -> int:
    _configure_threads()
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        pre = argparse.ArgumentParser(add_help=False)
        pre.add_argument("--config")
        peek, rest = pre.parse_known_args(argv)
        command = next((a for a in rest if not a.startswith("-")), None)
        sub = _subparser(parser, command)
        if peek.config and sub is not None:
            _install_config(sub, command, peek.config)
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
        return args.func(args)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    except UsageError as exc:
        print(f"gpq: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:
        code = _exit_code(exc)
        if code is None:
            raise
        print(f"gpq: error: {exc}", file=sys.stderr)
        return code


def _exit_code(exc: Exception) -> int | None:
    from .errors import FormatError, InvalidConfig, IoError, ShapeMismatch, TrainingDiverged

    if isinstance(exc, TrainingDiverged):
        return EXIT_DIVERGED
    if isinstance(exc, ShapeMismatch):
        return EXIT_SHAPE
    if isinstance(exc, (IoError, FormatError, OSError)):
        return EXIT_IO
    if isinstance(exc, (InvalidConfig, ValueError)):
        return EXIT_USAGE
    return None


if __name__ == "__main__":
    sys.exit(main())
