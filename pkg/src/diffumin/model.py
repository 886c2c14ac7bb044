"""Full CTR model, its ablation variants, and checkpoint files."""

import dataclasses
import hashlib
import json
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .cmic import CMIC
from .dmig import DMIG, PURPOSE_LOSS, PURPOSE_SAMPLE
from .errors import ConfigError, ValidationError
from .features import FeatureTables, embed
from .omie import OMIE, orthogonalize, project_target, similarity_filter

VARIANTS = ("Full", "A", "B", "C", "D", "E", "W", "X", "Y", "Z")

VARIANT_NOTES = {
    "Full": "all modules",
    "A": "similarity-only filtering, single interest",
    "B": "no aggregated interests in prediction",
    "C": "no contrastive calibrator",
    "D": "no diffusion generator, no calibrator",
    "E": "no short-term encoder",
    "W": "no contextual-interest guidance",
    "X": "no interest-channel guidance",
    "Y": "no guidance",
    "Z": "sampling starts from pure noise",
}

PROB_CLAMP = 1e-7

# sub-stream tags so shared modules initialize identically in every variant
_INIT_TABLES, _INIT_OMIE, _INIT_ENCODER, _INIT_DMIG, _INIT_CMIC, _INIT_MLP = range(10, 16)


@dataclass
class ModelConfig:
    # vocabulary (id 0 is padding everywhere)
    n_items: int = 1000
    n_categories: int = 8
    other_vocab: list = field(default_factory=lambda: [16])
    item_dim: int = 4
    cat_dim: int = 4
    other_dim: int = 8
    embedding_std: float = 0.01
    # sequence
    l: int = 200
    k: int = 4
    # interest extraction
    channels: int = 4
    top_p_percent: float = 20.0
    filter_mode: str = "top_p"
    top_k_count: int = None
    # diffusion
    T: int = 1000
    T_prime: int = 20
    beta_start: float = 1e-4
    beta_end: float = 0.02
    denoiser_layers: int = 1
    ffn_width: int = 32
    # contrastive calibration and loss weights
    tau: float = 0.05
    lambda_d: float = 0.01
    lambda_cl: float = 0.001
    # prediction and short-term encoder
    mlp_widths: list = field(default_factory=lambda: [200, 80])
    encoder_layers: int = 1
    encoder_heads: int = 2
    encoder_ffn: int = 32
    variant: str = "Full"
    # training
    lr: float = 0.001
    batch_size: int = 256
    epochs: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.k > self.l:
            raise ConfigError(f"short window k={self.k} exceeds sequence length l={self.l}")
        if self.d % self.encoder_heads:
            raise ConfigError(f"encoder_heads={self.encoder_heads} must divide d={self.d}")
        if self.batch_size < 1 or self.lr <= 0:
            raise ConfigError("batch_size and lr must be positive")

    @property
    def d(self):
        return self.item_dim + self.cat_dim

    @property
    def d_other(self):
        return self.other_dim * len(self.other_vocab)

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown configuration keys: {', '.join(unknown)}")
        return cls(**data)

    def with_variant(self, tag):
        return dataclasses.replace(self, variant=tag)


class EncoderLayer(nx.Module):
    def __init__(self, d, heads, d_f, rng):
        s = 1.0 / math.sqrt(d)
        self.heads = heads
        self.ln_attn = nx.LayerNorm(d)
        self.q = nx.Linear(d, d, rng, bias=False, scale=s)
        self.k = nx.Linear(d, d, rng, bias=False, scale=s)
        self.v = nx.Linear(d, d, rng, bias=False, scale=s)
        self.o = nx.Linear(d, d, rng, bias=False, scale=s)
        self.ln_ffn = nx.LayerNorm(d)
        self.ffn_in = nx.Linear(d, d_f, rng)
        self.ffn_out = nx.Linear(d_f, d, rng)

    def _split(self, x):
        N, n, d = x.shape
        return nx.transpose(nx.reshape(x, (N, n, self.heads, d // self.heads)), (0, 2, 1, 3))

    def __call__(self, h, key_mask):
        N, n, d = h.shape
        a = self.ln_attn(h)
        heads = nx.scaled_dot_attention(self._split(self.q(a)), self._split(self.k(a)),
                                        self._split(self.v(a)), key_mask[:, None, :])
        merged = nx.reshape(nx.transpose(heads, (0, 2, 1, 3)), (N, n, d))
        h = h + self.o(merged)
        return h + self.ffn_out(nx.gelu(self.ffn_in(self.ln_ffn(h))))


class ShortTermEncoder(nx.Module):
    """Transformer over [e_1..e_k, e_s]; the target position is read out."""

    def __init__(self, d, k, rng, layers=1, heads=2, d_f=32):
        self.position = nx.Parameter(rng.normal(0.0, 0.01, (k + 1, d)), name="position")
        self.layers = [EncoderLayer(d, heads, d_f, rng) for _ in range(layers)]

    def __call__(self, E_k, e_s, mask_k):
        E_k, e_s = nx.as_tensor(E_k), nx.as_tensor(e_s)
        N, k, d = E_k.shape
        h = nx.concat([E_k, nx.reshape(e_s, (N, 1, d))], axis=1) + self.position
        key_mask = np.concatenate([np.asarray(mask_k, dtype=bool), np.ones((N, 1), bool)], axis=1)
        for layer in self.layers:
            h = layer(h, key_mask)
        return h[:, k, :]


class PredictionMLP(nx.Module):
    def __init__(self, n_in, widths, rng):
        dims = [n_in, *widths, 1]
        self.layers = [nx.Linear(a, b, rng) for a, b in zip(dims[:-1], dims[1:])]

    def logits(self, x):
        for layer in self.layers[:-1]:
            x = nx.gelu(layer(x))
        return self.layers[-1](x)[..., 0]

    def __call__(self, x):
        return nx.sigmoid(self.logits(x))


def bce(y_hat, labels):
    """Mean binary cross-entropy with predictions clamped away from 0 and 1."""
    p = nx.clip(y_hat, PROB_CLAMP, 1.0 - PROB_CLAMP)
    y = np.asarray(labels, dtype=float)
    return -nx.mean(nx.log(p) * y + nx.log(1.0 - p) * (1.0 - y))


@dataclass
class Losses:
    total: nx.Tensor
    ctr: nx.Tensor
    diffusion: nx.Tensor
    contrastive: nx.Tensor

    def as_floats(self):
        return {"L": self.total.item(), "L_ctr": self.ctr.item(),
                "L_d": self.diffusion.item(), "L_cl": self.contrastive.item()}


@dataclass
class ForwardResult:
    y_hat: nx.Tensor
    O: nx.Tensor
    r: nx.Tensor
    r_star: np.ndarray  # None when the variant has no generator
    losses: Losses = None


ZERO = nx.Tensor(0.0)


class DiffuMIN(nx.Module):
    def __init__(self, config):
        cfg = self.config = config
        v = cfg.variant
        seed = cfg.seed
        d = cfg.d
        self.tables = FeatureTables(cfg.n_items, cfg.n_categories, cfg.other_vocab,
                                    cfg.item_dim, cfg.cat_dim, cfg.other_dim,
                                    rng=nx.Rng(seed, _INIT_TABLES), std=cfg.embedding_std)
        self.n_interests = 1 if v == "A" else cfg.channels
        self.omie = OMIE(d, self.n_interests, nx.Rng(seed, _INIT_OMIE), cfg.top_p_percent,
                         cfg.filter_mode, cfg.top_k_count)
        self.use_short_term = v != "E"
        self.encoder = (ShortTermEncoder(d, cfg.k, nx.Rng(seed, _INIT_ENCODER),
                                         cfg.encoder_layers, cfg.encoder_heads, cfg.encoder_ffn)
                        if self.use_short_term else None)
        self.use_dmig = v != "D"
        self.dmig = (DMIG(d, nx.Rng(seed, _INIT_DMIG), cfg.T, cfg.T_prime, cfg.denoiser_layers,
                          cfg.ffn_width, cfg.beta_start, cfg.beta_end,
                          use_context=v not in ("W", "Y"), use_channel=v not in ("X", "Y"),
                          start_from_noise=v == "Z")
                     if self.use_dmig else None)
        self.use_cmic = v not in ("C", "D")
        self.cmic = CMIC(d, nx.Rng(seed, _INIT_CMIC), cfg.tau) if self.use_cmic else None
        self.use_r_in_mlp = v != "B"
        self.mlp = PredictionMLP(self.mlp_input_width, cfg.mlp_widths, nx.Rng(seed, _INIT_MLP))

    @property
    def mlp_input_width(self):
        cd = self.n_interests * self.config.d
        width = self.config.d_other + self.config.d
        if self.use_r_in_mlp:
            width += cd
        if self.use_dmig:
            width += cd
        return width

    # -- pieces -----------------------------------------------------------

    def extract(self, bundle):
        """(O, r) for the batch; Variant A swaps in similarity filtering."""
        if self.config.variant == "A":
            O = orthogonalize(project_target(bundle.e_s, self.omie.W, 1))
            r, _ = similarity_filter(bundle.E, bundle.e_s, self.config.top_p_percent, bundle.mask)
            return O, r
        out = self.omie(bundle.E, bundle.e_s, bundle.mask)
        return out.O, out.r

    def short_term(self, bundle):
        if not self.use_short_term:
            return bundle.e_s
        return self.encoder(bundle.E_k, bundle.e_s, bundle.mask_k)

    def predict(self, r, r_star, e_other, e_s_star):
        """ŷ = σ(MLP([r, r*, e_other, e_s*])) with r, r* flattened row-major."""
        B = e_other.shape[0]
        parts = []
        if self.use_r_in_mlp:
            parts.append(nx.reshape(r, (B, -1)))
        if self.use_dmig:
            parts.append(nx.reshape(nx.as_tensor(r_star), (B, -1)))
        parts += [e_other, e_s_star]
        return self.mlp(nx.concat(parts, axis=-1))

    def rngs(self, purpose, indices, stream=0):
        return [nx.Rng(self.config.seed, purpose, stream, int(i)) for i in indices]

    # -- full passes ------------------------------------------------------

    def forward(self, ids, training, stream=0, aux_losses=True):
        """Score a collated batch; in training mode also build the losses.

        ``stream`` separates the random draws of different epochs or
        evaluation passes; draws are keyed by each example's own index.
        """
        cfg = self.config
        bundle = embed(ids, self.tables, cfg.k)
        O, r = self.extract(bundle)
        r_star = None
        if self.use_dmig:
            r_det, O_det = nx.stop_gradient(r), nx.stop_gradient(O)
            r_star = self.dmig.sample(r_det.data, O_det.data,
                                      self.rngs(PURPOSE_SAMPLE, ids.index, stream),
                                      eval_mode=not training)
        y_hat = self.predict(r, r_star, bundle.e_other, self.short_term(bundle))
        result = ForwardResult(y_hat, O, r, r_star)
        if training:
            result.losses = self.total_loss(ids, result, stream, aux_losses)
        return result

    def total_loss(self, ids, result, stream=0, aux_losses=True):
        cfg = self.config
        l_ctr = bce(result.y_hat, ids.labels)
        l_d = l_cl = ZERO
        if aux_losses and self.use_dmig:
            l_d = self.dmig.diffusion_loss(nx.stop_gradient(result.r).data,
                                           nx.stop_gradient(result.O).data,
                                           self.rngs(PURPOSE_LOSS, ids.index, stream))
        if aux_losses and self.use_cmic:
            l_cl = self.cmic(result.r, result.r_star)
        total = l_ctr + cfg.lambda_d * l_d + cfg.lambda_cl * l_cl
        return Losses(total, l_ctr, l_d, l_cl)

    def score(self, ids, stream=0):
        """Evaluation-mode click probabilities (numpy), no tape."""
        with nx.no_grad():
            return self.forward(ids, training=False, stream=stream).y_hat.data


def build_variant(config, tag=None):
    """Model for ``config`` with the ablation named by ``tag`` applied."""
    if tag is not None:
        config = config.with_variant(tag)
    return DiffuMIN(config)


# -- checkpoints ------------------------------------------------------------

MAGIC = b"DMIN01"


def save_checkpoint(model, path):
    """Magic, little-endian u64 manifest length, manifest JSON, f64 blocks."""
    params = list(model.named_parameters())
    manifest = {
        "format": "DMIN01",
        "config": model.config.to_dict(),
        "parameters": [[name, list(p.shape)] for name, p in params],
    }
    blob = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for _, p in params:
            fh.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
    return file_hash(path)


def load_checkpoint(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:len(MAGIC)] != MAGIC or len(raw) < len(MAGIC) + 8:
        raise ValidationError(f"{path}: not a DMIN01 checkpoint")
    (n,) = struct.unpack_from("<Q", raw, len(MAGIC))
    start = len(MAGIC) + 8
    try:
        manifest = json.loads(raw[start:start + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ValidationError(f"{path}: corrupt checkpoint manifest ({exc})") from None
    model = DiffuMIN(ModelConfig.from_dict(manifest["config"]))
    offset = start + n
    params = list(model.named_parameters())
    if [[nm, list(p.shape)] for nm, p in params] != manifest["parameters"]:
        raise ValidationError(f"{path}: parameter layout does not match its config")
    for name, p in params:
        count = p.data.size
        if offset + 8 * count > len(raw):
            raise ValidationError(f"{path}: truncated parameter block for {name}")
        block = np.frombuffer(raw, dtype="<f8", count=count, offset=offset)
        p.data[...] = block.reshape(p.shape)
        offset += 8 * count
    if offset != len(raw):
        raise ValidationError(f"{path}: {len(raw) - offset} trailing bytes")
    return model


def file_hash(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
