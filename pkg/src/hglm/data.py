"""Byte-level corpus handling, deterministic batching, checkpoint
serialization, and flat key=value config parsing.

Checkpoint layout (little-endian throughout): magic b"HGLM", u32 version,
u32-length-prefixed config text, u32 tensor count, then per tensor a
u32-length-prefixed name, u32 rank, one u64 per dimension, and the raw
float64 payload in row-major order.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, fields

import numpy as np

from .model import ConfigError, LanguageModel, ModelConfig, Tensor

CHECKPOINT_MAGIC = b"HGLM"
CHECKPOINT_VERSION = 1


class CorpusError(ValueError):
    """The token stream cannot satisfy the requested batching."""


class CheckpointError(ValueError):
    """Base class for checkpoint load failures."""


class CheckpointMagicError(CheckpointError):
    """The file does not start with the checkpoint magic, or the version is unknown."""


class CheckpointTruncatedError(CheckpointError):
    """The file ended before the declared contents were read."""


class CheckpointMismatchError(CheckpointError):
    """Stored tensors do not fit the configuration they were loaded into."""


# -- corpus ---------------------------------------------------------------------


def tokenize_bytes(text: bytes) -> list[int]:
    """Identity byte-to-id mapping (vocab 0..255)."""
    return list(text)


def detokenize_bytes(ids) -> bytes:
    return bytes(int(i) for i in ids)


@dataclass(frozen=True)
class Corpus:
    """An ordered token stream with its provenance."""

    tokens: np.ndarray
    sources: tuple[str, ...] = ()

    def __len__(self):
        return int(self.tokens.shape[0])

    @classmethod
    def from_bytes(cls, data: bytes, source: str = "<bytes>") -> "Corpus":
        return cls(tokens=np.frombuffer(data, dtype=np.uint8).astype(np.int64), sources=(source,))

    @classmethod
    def from_file(cls, path: str) -> "Corpus":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read(), source=path)

    @classmethod
    def from_token_file(cls, path: str) -> "Corpus":
        """Pre-tokenized stream: raw little-endian uint32 ids."""
        ids = np.fromfile(path, dtype="<u4").astype(np.int64)
        return cls(tokens=ids, sources=(path,))

    def check_vocab(self, vocab_size: int) -> "Corpus":
        if len(self) and int(self.tokens.max()) >= vocab_size:
            raise CorpusError(
                f"corpus {self.sources} holds id {int(self.tokens.max())} "
                f"outside vocab of size {vocab_size}"
            )
        return self


def window_count(n_tokens: int, seq_len: int) -> int:
    """Non-overlapping shift-by-one windows available in a stream."""
    return max(0, (n_tokens - 1) // seq_len)


def batch_iterator(corpus: Corpus, seq_len: int, batch_tokens: int, seed: int,
                   skip_tokens: int = 0, allow_wrap: bool = False):
    """Yield (inputs, targets) windows in a seed-determined order.

    Windows are contiguous, non-overlapping, and shifted by one for targets.
    The order is a seeded permutation of window indices, so two consumers
    with the same (corpus, seq_len, seed) see identical streams. Exhausting
    the stream raises CorpusError unless allow_wrap re-permutes and continues.
    """
    if batch_tokens % seq_len != 0:
        raise CorpusError(f"batch_tokens {batch_tokens} is not a multiple of seq_len {seq_len}")
    if skip_tokens % seq_len != 0:
        raise CorpusError(f"skip_tokens {skip_tokens} is not a multiple of seq_len {seq_len}")
    n_windows = window_count(len(corpus), seq_len)
    if n_windows == 0:
        raise CorpusError(
            f"corpus of {len(corpus)} tokens yields no windows of length {seq_len}"
        )

    def generate():
        tokens = corpus.tokens
        rng = np.random.default_rng(seed)
        skip = skip_tokens // seq_len
        while True:
            order = rng.permutation(n_windows)
            for w in order:
                if skip > 0:
                    skip -= 1
                    continue
                start = int(w) * seq_len
                yield tokens[start : start + seq_len], tokens[start + 1 : start + seq_len + 1]
            if not allow_wrap:
                raise CorpusError(
                    f"corpus exhausted after {n_windows} windows of {seq_len} tokens; "
                    "pass allow_wrap=True to cycle"
                )

    return generate()


# -- flat key=value configs --------------------------------------------------------


def parse_kv_text(text: str) -> dict[str, str]:
    """Parse flat key=value lines; '#' comments and blank lines are skipped."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        key, value = line.split("=", 1)
        key, value = key.strip(), value.strip()
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def read_config_file(path: str) -> dict[str, str]:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_kv_text(fh.read())


def _coerce(field_type, key: str, raw: str):
    try:
        if field_type is int:
            return int(raw)
        if field_type is float:
            return float(raw)
    except ValueError:
        raise ConfigError(f"key {key!r}: cannot parse {raw!r} as {field_type.__name__}") from None
    return raw


def config_from_mapping(cls, mapping: dict[str, str], *, what: str):
    """Build a config dataclass from string values; unknown keys are errors."""
    by_name = {f.name: f for f in fields(cls)}
    unknown = sorted(set(mapping) - set(by_name))
    if unknown:
        raise ConfigError(f"unknown {what} key(s): {', '.join(unknown)}")
    kwargs = {}
    for key, raw in mapping.items():
        ftype = by_name[key].type
        if ftype in ("int", int):
            kwargs[key] = _coerce(int, key, raw)
        elif ftype in ("float", float):
            kwargs[key] = _coerce(float, key, raw)
        else:
            kwargs[key] = raw
    return cls(**kwargs)


def model_config_keys() -> set[str]:
    return {f.name for f in fields(ModelConfig)}


def model_config_from_mapping(mapping: dict[str, str]) -> ModelConfig:
    return config_from_mapping(ModelConfig, mapping, what="model config")


def model_config_to_text(cfg: ModelConfig) -> str:
    return "".join(f"{f.name}={getattr(cfg, f.name)}\n" for f in fields(ModelConfig))


# -- checkpoints ---------------------------------------------------------------------


def _write_u32(fh, value: int):
    fh.write(struct.pack("<I", value))


def _write_u64(fh, value: int):
    fh.write(struct.pack("<Q", value))


def _write_tensor(fh, name: str, array: np.ndarray):
    encoded = name.encode("utf-8")
    _write_u32(fh, len(encoded))
    fh.write(encoded)
    _write_u32(fh, array.ndim)
    for dim in array.shape:
        _write_u64(fh, dim)
    fh.write(np.ascontiguousarray(array, dtype="<f8").tobytes())


def save_checkpoint(model: LanguageModel, path: str, state=None, tokens_seen: int = 0) -> None:
    """Write model weights (and optionally optimizer state) bit-exactly."""
    header = model_config_to_text(model.config)
    header += f"tokens_seen={int(tokens_seen)}\n"
    named = list(model.parameters())
    if state is not None:
        header += f"opt_step={int(state.step)}\n"
        named += [(f"opt.m.{n}", Tensor(a)) for n, a in state.m.items()]
        named += [(f"opt.v.{n}", Tensor(a)) for n, a in state.v.items()]
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        _write_u32(fh, CHECKPOINT_VERSION)
        encoded = header.encode("utf-8")
        _write_u32(fh, len(encoded))
        fh.write(encoded)
        _write_u32(fh, len(named))
        for name, tensor in named:
            _write_tensor(fh, name, tensor.data)


class _Reader:
    def __init__(self, fh):
        self.fh = fh

    def read(self, n: int, what: str) -> bytes:
        data = self.fh.read(n)
        if len(data) != n:
            raise CheckpointTruncatedError(f"file ended while reading {what}")
        return data

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.read(4, what))[0]

    def u64(self, what: str) -> int:
        return struct.unpack("<Q", self.read(8, what))[0]


def _expected_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, dh = cfg.d_model, cfg.d_h
    shapes: dict[str, tuple[int, ...]] = {"embedding": (cfg.vocab_size, d)}
    for i in range(cfg.n_layers):
        for w in ("w_q", "w_k", "w_v", "w_o"):
            shapes[f"layers.{i}.attn.{w}"] = (d, d)
        shapes[f"layers.{i}.attn.gamma"] = (d,)
        for j in range(cfg.ffn_blocks):
            shapes[f"layers.{i}.ffn.{j}.w_gate"] = (d, dh)
            shapes[f"layers.{i}.ffn.{j}.w_val"] = (d, dh)
            shapes[f"layers.{i}.ffn.{j}.w_out"] = (dh, d)
            shapes[f"layers.{i}.ffn.{j}.gamma"] = (d,)
    shapes["final_gamma"] = (d,)
    shapes["head"] = (d, cfg.vocab_size)
    return shapes


def load_checkpoint(path: str, expected_config: ModelConfig | None = None):
    """Load (model, optimizer_state, tokens_seen) from a checkpoint file.

    With expected_config given, the stored tensor set must match it exactly;
    the first mismatching tensor is named in the error.
    """
    from .training import OptimizerState  # local import to avoid a cycle

    with open(path, "rb") as fh:
        reader = _Reader(fh)
        if reader.read(4, "magic") != CHECKPOINT_MAGIC:
            raise CheckpointMagicError(f"{path} is not a checkpoint (bad magic)")
        version = reader.u32("version")
        if version != CHECKPOINT_VERSION:
            raise CheckpointMagicError(f"unsupported checkpoint version {version}")
        header_len = reader.u32("config length")
        header = parse_kv_text(reader.read(header_len, "config text").decode("utf-8"))
        tokens_seen = int(header.pop("tokens_seen", "0"))
        opt_step = header.pop("opt_step", None)
        cfg = model_config_from_mapping(header)
        tensors: dict[str, np.ndarray] = {}
        count = reader.u32("tensor count")
        for _ in range(count):
            name_len = reader.u32("tensor name length")
            name = reader.read(name_len, "tensor name").decode("utf-8")
            rank = reader.u32(f"rank of {name}")
            shape = tuple(reader.u64(f"dim of {name}") for _ in range(rank))
            n_elems = int(np.prod(shape, dtype=np.int64)) if shape else 1
            payload = reader.read(8 * n_elems, f"payload of {name}")
            tensors[name] = np.frombuffer(payload, dtype="<f8").reshape(shape).copy()

    target_cfg = expected_config if expected_config is not None else cfg
    expected = _expected_shapes(target_cfg)
    if expected_config is not None and expected_config != cfg:
        stored = _expected_shapes(cfg)
        for name in sorted(expected):
            if stored.get(name) != expected[name]:
                raise CheckpointMismatchError(
                    f"tensor {name!r} has shape {stored.get(name)}, expected {expected[name]}"
                )
        for f in fields(ModelConfig):
            if getattr(expected_config, f.name) != getattr(cfg, f.name):
                raise CheckpointMismatchError(
                    f"stored config field {f.name}={getattr(cfg, f.name)!r} does not match "
                    f"expected {getattr(expected_config, f.name)!r}"
                )
    for name in sorted(expected):
        if name not in tensors:
            raise CheckpointMismatchError(f"checkpoint is missing tensor {name!r}")
        if tensors[name].shape != expected[name]:
            raise CheckpointMismatchError(
                f"tensor {name!r} has shape {tensors[name].shape}, "
                f"expected {expected[name]}"
            )

    model = _model_from_tensors(target_cfg, tensors)
    state = None
    if opt_step is not None:
        m = {n: tensors[f"opt.m.{n}"] for n in expected if f"opt.m.{n}" in tensors}
        v = {n: tensors[f"opt.v.{n}"] for n in expected if f"opt.v.{n}" in tensors}
        if set(m) != set(expected) or set(v) != set(expected):
            raise CheckpointMismatchError("optimizer state tensors are incomplete")
        state = OptimizerState(m=m, v=v, step=int(opt_step))
    return model, state, tokens_seen


def _model_from_tensors(cfg: ModelConfig, tensors: dict[str, np.ndarray]) -> LanguageModel:
    from .model import FfnBlockWeights, LayerWeights

    def leaf(name):
        return Tensor(tensors[name], requires_grad=True)

    layers = []
    for i in range(cfg.n_layers):
        layer = LayerWeights(
            w_q=leaf(f"layers.{i}.attn.w_q"),
            w_k=leaf(f"layers.{i}.attn.w_k"),
            w_v=leaf(f"layers.{i}.attn.w_v"),
            w_o=leaf(f"layers.{i}.attn.w_o"),
            attn_gamma=leaf(f"layers.{i}.attn.gamma"),
        )
        for j in range(cfg.ffn_blocks):
            layer.ffn.append(
                FfnBlockWeights(
                    w_gate=leaf(f"layers.{i}.ffn.{j}.w_gate"),
                    w_val=leaf(f"layers.{i}.ffn.{j}.w_val"),
                    w_out=leaf(f"layers.{i}.ffn.{j}.w_out"),
                    gamma=leaf(f"layers.{i}.ffn.{j}.gamma"),
                )
            )
        layers.append(layer)
    return LanguageModel(
        config=cfg,
        embedding=leaf("embedding"),
        layers=layers,
        final_gamma=leaf("final_gamma"),
        head=leaf("head"),
    )
