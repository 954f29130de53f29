"""
Encoder - Tiny frozen transformer with a linear head and VPT-style prompt slots.

Token layout fed to the first block: [CLS], prompt_0..prompt_{L-1}, patch_1..patch_k.
Positional embeddings cover [CLS] and the patches only; prompts carry none.
"""

import logging
from dataclasses import dataclass, asdict, fields
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np

from app import autodiff as ad
from app.autodiff import Tensor, NonFiniteError

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = "DOCO-CHECKPOINT 1"


class CheckpointError(Exception):
    """Raised when a weight checkpoint cannot be read or written."""
    pass


@dataclass
class EncoderConfig:
    depth: int = 2
    d_model: int = 32
    n_heads: int = 4
    n_patches: int = 16
    d_in: int = 16
    mlp_ratio: int = 2
    n_classes: int = 8

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 1:
                raise ValueError(f"EncoderConfig.{f.name} must be >= 1, got {getattr(self, f.name)}")
        if self.d_model % self.n_heads != 0:
            raise ValueError(f"d_model ({self.d_model}) must be divisible by n_heads ({self.n_heads})")
        if self.d_model < 2:
            raise ValueError("d_model must be >= 2 for layernorm")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def mlp_hidden(self) -> int:
        return self.d_model * self.mlp_ratio

    @classmethod
    def from_dict(cls, data: Dict) -> "EncoderConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: int(v) for k, v in (data or {}).items() if k in known})

    def to_dict(self) -> Dict[str, int]:
        return asdict(self)


def _xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, shape, gain: float = 1.0) -> np.ndarray:
    bound = gain * np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


@dataclass
class PromptState:
    """L learnable prompt tokens of width d_model."""
    tokens: np.ndarray

    @property
    def length(self) -> int:
        return int(self.tokens.shape[0])

    @classmethod
    def xavier(cls, length: int, d_model: int, rng: np.random.Generator) -> "PromptState":
        if length < 0:
            raise ValueError(f"prompt length must be >= 0, got {length}")
        return cls(_xavier_uniform(rng, length, d_model, (length, d_model)))

    def copy(self) -> "PromptState":
        return PromptState(self.tokens.copy())


def init_prompt(length: int, d_model: int, rng: np.random.Generator) -> PromptState:
    """Xavier-uniform prompt, bound sqrt(6 / (length + d_model))."""
    return PromptState.xavier(length, d_model, rng)


class EncoderWeights:
    """
    Named float64 arrays of the encoder and head.

    After `freeze()` every array is read-only, so no adaptation code can write into them.
    Rows of `head_w` are the source class prototypes.
    """

    def __init__(self, config: EncoderConfig, tensors: Dict[str, np.ndarray]):
        self.config = config
        self.tensors = tensors
        self._validate()

    @staticmethod
    def expected_shapes(config: EncoderConfig) -> Dict[str, Tuple[int, ...]]:
        d, h = config.d_model, config.mlp_hidden
        shapes = {
            "patch_w": (config.d_in, d),
            "patch_b": (d,),
            "cls_token": (d,),
            "pos_embed": (config.n_patches + 1, d),
        }
        for i in range(config.depth):
            p = f"blocks.{i}."
            shapes.update({
                p + "ln1_g": (d,), p + "ln1_b": (d,),
                p + "qkv_w": (d, 3 * d), p + "qkv_b": (3 * d,),
                p + "out_w": (d, d), p + "out_b": (d,),
                p + "ln2_g": (d,), p + "ln2_b": (d,),
                p + "mlp_w1": (d, h), p + "mlp_b1": (h,),
                p + "mlp_w2": (h, d), p + "mlp_b2": (d,),
            })
        shapes.update({
            "final_ln_g": (d,), "final_ln_b": (d,),
            "head_w": (config.n_classes, d), "head_b": (config.n_classes,),
        })
        return shapes

    def _validate(self):
        expected = self.expected_shapes(self.config)
        if list(expected) != list(self.tensors):
            missing = set(expected) - set(self.tensors)
            extra = set(self.tensors) - set(expected)
            raise CheckpointError(f"Weight names mismatch. Missing: {sorted(missing)}, extra: {sorted(extra)}")
        for name, shape in expected.items():
            if self.tensors[name].shape != shape:
                raise CheckpointError(f"{name}: expected shape {shape}, got {self.tensors[name].shape}")

    @classmethod
    def initialize(cls, config: EncoderConfig, rng: np.random.Generator) -> "EncoderWeights":
        tensors = {}
        for name, shape in cls.expected_shapes(config).items():
            leaf = name.rsplit(".", 1)[-1]
            if leaf in ("cls_token", "pos_embed"):
                tensors[name] = rng.normal(0.0, 0.02, size=shape)
            elif leaf.endswith("_g"):
                tensors[name] = np.ones(shape)
            elif len(shape) == 2 and leaf != "pos_embed":
                fan_in, fan_out = (shape[1], shape[0]) if leaf == "head_w" else shape
                tensors[name] = _xavier_uniform(rng, fan_in, fan_out, shape)
            else:
                tensors[name] = np.zeros(shape)
        return cls(config, tensors)

    def freeze(self) -> "EncoderWeights":
        for arr in self.tensors.values():
            arr.setflags(write=False)
        return self

    @property
    def frozen(self) -> bool:
        return all(not arr.flags.writeable for arr in self.tensors.values())

    @property
    def prototypes(self) -> np.ndarray:
        return self.tensors["head_w"]

    def checksum(self) -> Dict[str, float]:
        return {name: float(np.abs(arr).sum()) for name, arr in self.tensors.items()}

    def as_tensors(self, requires_grad: bool = False) -> Dict[str, Tensor]:
        return {name: Tensor(arr, requires_grad=requires_grad) for name, arr in self.tensors.items()}

    # Checkpoint I/O
    def save(self, path: Union[str, Path]) -> Path:
        """
        Write the checkpoint: plain-text header, then little-endian float64 payload.

        Header lines:
            DOCO-CHECKPOINT 1
            config depth=2 d_model=32 ...
            std population
            tensor <name> <dim0>,<dim1>
            ...
            end
        """
        path = Path(path)
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            header = [CHECKPOINT_MAGIC,
                      "config " + " ".join(f"{k}={v}" for k, v in self.config.to_dict().items()),
                      "std population"]
            for name, arr in self.tensors.items():
                header.append(f"tensor {name} {','.join(str(s) for s in arr.shape)}")
            header.append("end")
            with open(path, "wb") as f:
                f.write(("\n".join(header) + "\n").encode("ascii"))
                for arr in self.tensors.values():
                    f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        except OSError as e:
            raise CheckpointError(f"Failed to write checkpoint {path}: {e}") from e
        logger.info(f"Checkpoint written: {path}")
        return path

    @classmethod
    def load(cls, path: Union[str, Path]) -> "EncoderWeights":
        path = Path(path)
        if not path.exists():
            raise CheckpointError(f"Checkpoint not found: {path}")
        raw = path.read_bytes()
        lines: List[str] = []
        offset = 0
        while True:
            nl = raw.find(b"\n", offset)
            if nl < 0:
                raise CheckpointError(f"{path}: truncated header")
            lines.append(raw[offset:nl].decode("ascii"))
            offset = nl + 1
            if lines[-1] == "end":
                break

        if lines[0] != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: bad magic line '{lines[0]}'")
        config_fields = dict(item.split("=") for item in lines[1].split()[1:])
        config = EncoderConfig.from_dict(config_fields)
        if lines[2] != "std population":
            raise CheckpointError(f"{path}: unsupported std convention '{lines[2]}'")

        tensors = {}
        for line in lines[3:-1]:
            _, name, dims = line.split()
            shape = tuple(int(s) for s in dims.split(","))
            count = int(np.prod(shape))
            end = offset + 8 * count
            if end > len(raw):
                raise CheckpointError(f"{path}: payload too short for {name}")
            tensors[name] = np.frombuffer(raw[offset:end], dtype="<f8").astype(np.float64).reshape(shape)
            offset = end
        if offset != len(raw):
            raise CheckpointError(f"{path}: {len(raw) - offset} trailing bytes")
        return cls(config, tensors).freeze()


class Encoder:
    """Forward passes over frozen weights; only prompt tensors may carry gradients."""

    def __init__(self, weights: EncoderWeights):
        self.weights = weights
        self.config = weights.config
        self._constants = weights.as_tensors(requires_grad=False)

    def forward_features(self, tokens: np.ndarray, prompt: Optional[Union[PromptState, Tensor]] = None,
                         params: Optional[Dict[str, Tensor]] = None) -> Tensor:
        """
        [CLS] representation after the last block.

        Args:
            tokens: Patch tokens, shape (n, n_patches, d_in)
            prompt: Prompt tokens (L, d_model); None gives the raw feature phi(x)
            params: Override tensors (used by pretraining to track weight gradients)

        Returns:
            Tensor of shape (n, d_model)

        Raises:
            DimensionError: On shape mismatches
            NonFiniteError: If activations are non-finite
        """
        cfg = self.config
        p = params if params is not None else self._constants
        tokens = np.asarray(tokens, dtype=np.float64)
        if tokens.ndim != 3 or tokens.shape[1:] != (cfg.n_patches, cfg.d_in):
            raise ad.DimensionError(
                f"tokens must have shape (n, {cfg.n_patches}, {cfg.d_in}), got {tokens.shape}")
        n = tokens.shape[0]
        if n == 0:
            raise ad.DimensionError("forward_features needs a nonempty batch")
        if not np.all(np.isfinite(tokens)):
            raise NonFiniteError("non-finite input tokens")

        d = cfg.d_model
        x = ad.matmul(Tensor(tokens), p["patch_w"]) + p["patch_b"]
        x = x + p["pos_embed"][1:]
        cls = ad.broadcast_to(ad.reshape(p["cls_token"] + p["pos_embed"][0], (1, 1, d)), (n, 1, d))
        parts = [cls]

        if prompt is not None:
            prompt_t = Tensor(prompt.tokens) if isinstance(prompt, PromptState) else prompt
            if prompt_t.ndim != 2 or prompt_t.shape[1] != d:
                raise ad.DimensionError(f"prompt must have shape (L, {d}), got {prompt_t.shape}")
            length = prompt_t.shape[0]
            if length > 0:
                parts.append(ad.broadcast_to(ad.reshape(prompt_t, (1, length, d)), (n, length, d)))
        parts.append(x)
        h = ad.concat(parts, axis=1)

        for i in range(cfg.depth):
            h = self._block(h, p, f"blocks.{i}.")

        z = ad.layernorm(h[:, 0, :], p["final_ln_g"], p["final_ln_b"])
        return ad.check_finite(z, "encoder features")

    def _block(self, h: Tensor, p: Dict[str, Tensor], prefix: str) -> Tensor:
        h = h + self._attention(ad.layernorm(h, p[prefix + "ln1_g"], p[prefix + "ln1_b"]), p, prefix)
        u = ad.layernorm(h, p[prefix + "ln2_g"], p[prefix + "ln2_b"])
        u = ad.gelu(ad.matmul(u, p[prefix + "mlp_w1"]) + p[prefix + "mlp_b1"])
        return h + (ad.matmul(u, p[prefix + "mlp_w2"]) + p[prefix + "mlp_b2"])

    def _attention(self, x: Tensor, p: Dict[str, Tensor], prefix: str) -> Tensor:
        cfg = self.config
        n, seq, d = x.shape
        heads, hd = cfg.n_heads, cfg.head_dim

        qkv = ad.matmul(x, p[prefix + "qkv_w"]) + p[prefix + "qkv_b"]
        qkv = ad.transpose(ad.reshape(qkv, (n, seq, 3, heads, hd)), (2, 0, 3, 1, 4))
        q, k, v = qkv[0], qkv[1], qkv[2]

        scores = ad.matmul(q, ad.transpose(k)) * (1.0 / np.sqrt(hd))
        attn = ad.softmax(scores, axis=-1)
        out = ad.transpose(ad.matmul(attn, v), (0, 2, 1, 3))
        out = ad.reshape(out, (n, seq, d))
        return ad.matmul(out, p[prefix + "out_w"]) + p[prefix + "out_b"]

    def forward_logits(self, features: Union[Tensor, np.ndarray],
                       params: Optional[Dict[str, Tensor]] = None) -> Tensor:
        """logits = features @ W_h^T + b_h"""
        p = params if params is not None else self._constants
        features = ad.as_tensor(features)
        if features.ndim != 2 or features.shape[1] != self.config.d_model:
            raise ad.DimensionError(
                f"features must have shape (n, {self.config.d_model}), got {features.shape}")
        return ad.matmul(features, ad.transpose(p["head_w"])) + p["head_b"]

    # numpy conveniences for inference-only paths
    def features(self, tokens: np.ndarray, prompt: Optional[PromptState] = None) -> np.ndarray:
        return self.forward_features(tokens, prompt).data

    def logits(self, features: np.ndarray) -> np.ndarray:
        return self.forward_logits(features).data
