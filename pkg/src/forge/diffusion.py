"""Token-level conditional diffusion.

The model is three trainable parts sharing one loss: the condition
projections, the recurrent prototype module and a 1D-conv noise predictor.
Token j is denoised conditioned on the prototype obtained by scanning the
clean tokens before it (a learned start token stands in for token 0), which
is exactly what is available when tokens are generated one after another.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .conditioning import Condition, ConditionEncoder
from .lora import LoraAdapter
from .recurrent import SsmBlock, ssm_step
from .tokenizer import TokenLayout, TokenSequence, detokenize


@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray  # index t-1 holds beta_t

    @property
    def T(self) -> int:
        return len(self.betas)

    @property
    def alphas(self) -> np.ndarray:
        return 1.0 - self.betas

    @property
    def alphabars(self) -> np.ndarray:
        """alphabar_t for t = 0..T (alphabar_0 = 1)."""
        return np.concatenate([[1.0], np.cumprod(1.0 - self.betas)])

    def signal(self, t) -> np.ndarray:
        return np.sqrt(self.alphabars[t])

    def noise(self, t) -> np.ndarray:
        return np.sqrt(1.0 - self.alphabars[t])

    def posterior_variance(self, t: int) -> float:
        ab = self.alphabars
        return float(self.betas[t - 1] * (1.0 - ab[t - 1]) / (1.0 - ab[t]))


def make_schedule(T: int, kind: str = "linear", beta_start: float = 1e-4, beta_end: float = 0.02, scale_to_steps: bool = True) -> NoiseSchedule:
    """Linear beta schedule.

    ``beta_start``/``beta_end`` are quoted for 1000 steps; with
    ``scale_to_steps`` they are multiplied by 1000/T so shorter chains still
    end near pure noise. Betas are capped below 1.
    """
    if T < 1:
        raise ValueError("schedule needs T >= 1")
    if kind != "linear":
        raise ValueError(f"unsupported schedule kind {kind!r}")
    scale = 1000.0 / T if scale_to_steps else 1.0
    betas = np.linspace(beta_start * scale, beta_end * scale, T)
    return NoiseSchedule(np.clip(betas, 1e-8, 0.999))


def forward_diffuse(u0, t, eps, schedule: NoiseSchedule) -> np.ndarray:
    """u_t = sqrt(alphabar_t) u_0 + sqrt(1 - alphabar_t) eps; t may be an array, t=0 returns u_0."""
    t_arr = np.asarray(t)
    if np.any(t_arr < 0) or np.any(t_arr > schedule.T):
        raise ValueError(f"timestep out of range [0, {schedule.T}]: {t}")
    u0 = np.asarray(u0)
    a = schedule.signal(t_arr)
    s = schedule.noise(t_arr)
    if t_arr.ndim:
        a = a.reshape(-1, *([1] * (u0.ndim - 1)))
        s = s.reshape(-1, *([1] * (u0.ndim - 1)))
    return a * u0 + s * np.asarray(eps)


def timestep_embedding(t: np.ndarray, dim: int) -> np.ndarray:
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    ang = np.asarray(t, dtype=np.float64)[:, None] * freqs[None]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


class Denoiser:
    """Residual 1D-conv noise predictor over the k elements of one token.

    An embedding of (condition, timestep, token position) drives a per-block
    scale/shift and is also projected onto ``cond_channels`` per-element input
    channels, which sit next to the noisy token and the ``proto_channels``
    prototype channels. FiLM alone is constant along the token, so without
    the projected channels the condition could not address single elements.
    """

    def __init__(self, k: int, proto_channels: int, cond_dim: int, channels: int = 64, blocks: int = 3, kernel: int = 3, time_dim: int = 32,
                 embed_dim: int = 128, pos_dim: int = 16, cond_channels: int = 4, seed: int = 0):
        if kernel % 2 == 0:
            raise nx.ConfigError("denoiser kernel must be odd")
        rng = nx.rng_stream(seed, "denoiser-init")
        self.k, self.proto_channels, self.cond_dim = k, proto_channels, cond_dim
        self.channels, self.time_dim, self.pos_dim, self.cond_channels = channels, time_dim, pos_dim, cond_channels
        c, K = channels, kernel
        e_in = cond_dim + time_dim + pos_dim
        c_in = 1 + proto_channels + cond_channels

        def w(*shape, fan_in):
            return rng.standard_normal(shape) / np.sqrt(fan_in)

        self.p = {
            "emb.w1": nx.parameter(w(e_in, embed_dim, fan_in=e_in)),
            "emb.b1": nx.parameter(np.zeros(embed_dim)),
            "emb.w2": nx.parameter(w(embed_dim, embed_dim, fan_in=embed_dim)),
            "emb.b2": nx.parameter(np.zeros(embed_dim)),
            "cond.w": nx.parameter(w(embed_dim, k * cond_channels, fan_in=embed_dim)),
            "cond.b": nx.parameter(np.zeros(k * cond_channels)),
            "in.w": nx.parameter(w(c, c_in, K, fan_in=c_in * K)),
            "in.b": nx.parameter(np.zeros(c)),
            "out.w": nx.parameter(np.zeros((1, c, K))),
            "out.b": nx.parameter(np.zeros(1)),
        }
        self.blocks = blocks
        for i in range(blocks):
            self.p[f"b{i}.norm.g"] = nx.parameter(np.ones(c))
            self.p[f"b{i}.norm.b"] = nx.parameter(np.zeros(c))
            self.p[f"b{i}.conv1.w"] = nx.parameter(w(c, c, K, fan_in=c * K))
            self.p[f"b{i}.conv1.b"] = nx.parameter(np.zeros(c))
            self.p[f"b{i}.film.w"] = nx.parameter(w(embed_dim, 2 * c, fan_in=embed_dim) * 0.1)
            self.p[f"b{i}.film.b"] = nx.parameter(np.zeros(2 * c))
            self.p[f"b{i}.conv2.w"] = nx.parameter(w(c, c, K, fan_in=c * K) * 0.5)
            self.p[f"b{i}.conv2.b"] = nx.parameter(np.zeros(c))
        for name, t in self.p.items():
            t.name = f"denoiser.{name}"

    def parameters(self) -> list[nx.Tensor]:
        return list(self.p.values())

    def __call__(self, u_t, protos, cond, t, pos) -> nx.Tensor:
        """u_t (N, k), protos (N, proto_channels*k), cond (N, cond_dim), t (N,) ints, pos (N, pos_dim) -> eps_hat (N, k)."""
        p = self.p
        u_t, protos, cond = nx.as_tensor(u_t), nx.as_tensor(protos), nx.as_tensor(cond)
        n = u_t.shape[0]
        if u_t.shape != (n, self.k):
            raise nx.DimensionError(f"noisy tokens must be (N, {self.k}), got {u_t.shape}")
        if protos.shape != (n, self.proto_channels * self.k):
            raise nx.DimensionError(f"prototypes must be (N, {self.proto_channels * self.k}), got {protos.shape}")
        if cond.shape != (n, self.cond_dim):
            raise nx.DimensionError(f"condition must be (N, {self.cond_dim}), got {cond.shape}")
        pos = np.broadcast_to(np.asarray(pos, dtype=nx.default_dtype()), (n, self.pos_dim))
        temb = nx.Tensor(timestep_embedding(np.broadcast_to(np.asarray(t), (n,)), self.time_dim))
        e = nx.silu(nx.concat([cond, temb, nx.Tensor(pos)], axis=1) @ p["emb.w1"] + p["emb.b1"])
        e = nx.silu(e @ p["emb.w2"] + p["emb.b2"])
        # channels-last (N, k, C): layer norm runs over the trailing axis
        cch = (e @ p["cond.w"] + p["cond.b"]).reshape(n, self.k, self.cond_channels)
        x = nx.concat([u_t.reshape(n, self.k, 1), protos.reshape(n, self.k, self.proto_channels), cch], axis=2)
        h = nx.conv1d(x, p["in.w"], p["in.b"], channels_last=True)
        c = self.channels
        for i in range(self.blocks):
            r = nx.layer_norm(h, p[f"b{i}.norm.g"], p[f"b{i}.norm.b"])
            r = nx.conv1d(nx.silu(r), p[f"b{i}.conv1.w"], p[f"b{i}.conv1.b"], channels_last=True)
            film = (e @ p[f"b{i}.film.w"] + p[f"b{i}.film.b"]).reshape(n, 1, 2 * c)
            r = r * (film[:, :, :c] + 1.0) + film[:, :, c:]
            r = nx.conv1d(nx.silu(r), p[f"b{i}.conv2.w"], p[f"b{i}.conv2.b"], channels_last=True)
            h = h + r
        out = nx.conv1d(nx.silu(h), p["out.w"], p["out.b"], channels_last=True)
        return out.reshape(n, self.k)


class DiffusionModel:
    """Condition projections + recurrent prototypes + denoiser + schedule."""

    def __init__(self, k: int, pos_dim: int, schedule: NoiseSchedule, *, cond_model_dim=64, cond_text_dim=64, buckets=2048, ngram=3,
                 ssm_hidden=128, proto_channels=4, cond_channels=4, channels=64, blocks=3, kernel=3, time_dim=32, embed_dim=128, seed=0):
        self.k, self.pos_dim = k, pos_dim
        self.schedule = schedule
        self.proto_channels = proto_channels
        self.encoder = ConditionEncoder(cond_model_dim, cond_text_dim, buckets, ngram, seed)
        self.ssm = SsmBlock(k + pos_dim, ssm_hidden, proto_channels * k, seed)
        self.denoiser = Denoiser(k, proto_channels, cond_model_dim + cond_text_dim, channels, blocks, kernel, time_dim, embed_dim,
                                 pos_dim, cond_channels, seed)
        self.start_token = nx.parameter(np.zeros(k), "start_token")

    @property
    def cond_dim(self) -> int:
        return self.encoder.model_dim + self.encoder.text_dim

    def parameters(self) -> list[nx.Tensor]:
        return self.encoder.parameters() + self.ssm.parameters() + [self.start_token] + self.denoiser.parameters()

    def named_parameters(self) -> dict[str, nx.Tensor]:
        return {p.name: p for p in self.parameters()}

    def prototypes(self, tokens: np.ndarray, positions: np.ndarray) -> nx.Tensor:
        """Teacher-forced prototypes, (N*T, proto_channels*k).

        Step j sees [token j-1 ; position of token j]; step 1 sees the start token.
        """
        n, length, k = tokens.shape
        start = nx.broadcast_to(self.start_token.reshape(1, 1, k), (n, 1, k))
        prev = nx.concat([start, nx.Tensor(tokens[:, :-1, :])], axis=1) if length > 1 else start
        pos = nx.Tensor(np.broadcast_to(positions, (n, length, positions.shape[-1])))
        inputs = nx.concat([prev, pos], axis=2)
        h = self.ssm.zero_state(n)
        protos = []
        for j in range(length):
            p, h = ssm_step(self.ssm, inputs[:, j, :], h)
            protos.append(p)
        return nx.stack(protos, axis=1).reshape(n * length, self.proto_channels * k)

    def save_arrays(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters().items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        missing = set(params) - set(arrays)
        if missing:
            raise KeyError(f"checkpoint lacks parameters {sorted(missing)[:5]}")
        for name, p in params.items():
            if arrays[name].shape != p.shape:
                raise ValueError(f"parameter {name}: checkpoint shape {arrays[name].shape} != model shape {p.shape}")
            p.data = np.asarray(arrays[name], dtype=p.data.dtype)


def _stack_sequences(seqs: list[TokenSequence]):
    structure = seqs[0].layout.structure()
    for s in seqs[1:]:
        if s.layout.structure() != structure:
            raise ValueError("all sequences in a batch must share one layout structure")
    mask = np.stack([s.pad_mask for s in seqs])
    tokens = np.stack([s.tokens for s in seqs]) * ~mask
    return tokens, seqs[0].positions, mask


def diffusion_loss(model: DiffusionModel, seqs: list[TokenSequence], cond, rng: np.random.Generator | None = None,
                   t=None, eps=None, predictor=None, rows: int | None = None) -> nx.Tensor:
    """Masked noise-prediction MSE averaged over sampled (token, timestep) pairs.

    ``cond`` is (N_seq, cond_dim), usually the in-graph output of the
    condition encoder. Prototypes come from scanning every clean token; the
    denoiser then sees all N_seq*T tokens, or ``rows`` of them drawn without
    replacement, each with its own timestep. ``t``/``eps`` may be supplied
    (one entry per evaluated token); ``predictor`` replaces the denoiser.
    """
    if not seqs:
        raise ValueError("diffusion_loss needs a non-empty batch")
    tokens, positions, mask = _stack_sequences(seqs)
    n, length, k = tokens.shape
    m = n * length
    cond = nx.as_tensor(cond)
    if cond.shape[0] != n:
        raise nx.DimensionError(f"expected {n} condition rows, got {cond.shape[0]}")
    if rows is not None and rows < m:
        sel = np.sort(rng.choice(m, rows, replace=False))
    else:
        sel = np.arange(m)
    if t is None:
        t = rng.integers(1, model.schedule.T + 1, sel.size)
    if eps is None:
        eps = rng.standard_normal((sel.size, k))
    t = np.asarray(t)
    keep = (~mask.reshape(m, k)[sel]).astype(nx.default_dtype())
    u0 = tokens.reshape(m, k)[sel]
    u_t = forward_diffuse(u0, t, eps, model.schedule) * keep
    protos = nx.index(model.prototypes(tokens, positions), sel)
    cond_rows = nx.index(cond, sel // length)
    pos_rows = positions[sel % length]
    predict = predictor or model.denoiser
    eps_hat = predict(nx.Tensor(u_t), protos, cond_rows, t, pos_rows)
    err = nx.square(eps_hat - nx.Tensor(eps)) * keep
    return err.sum() * (1.0 / float(keep.sum()))


def sample_sequences(model: DiffusionModel, conds: np.ndarray, layout: TokenLayout, seeds: list[int]) -> list[TokenSequence]:
    """Generate one token sequence per (condition row, seed), position by position.

    For each position the prototype comes from the tokens generated so far;
    the token then runs the full ancestral chain from pure noise with
    posterior variance beta_t (1 - alphabar_{t-1}) / (1 - alphabar_t) and a
    noiseless last step.
    """
    conds = np.atleast_2d(np.asarray(conds, dtype=nx.default_dtype()))
    b = conds.shape[0]
    if len(seeds) != b:
        raise ValueError("one seed per condition row is required")
    if conds.shape[1] != model.cond_dim:
        raise nx.DimensionError(f"conditions have dim {conds.shape[1]}, model expects {model.cond_dim}")
    if layout.k != model.k or layout.pos_dim != model.pos_dim:
        raise nx.DimensionError(f"layout (k={layout.k}, pos_dim={layout.pos_dim}) does not match model (k={model.k}, pos_dim={model.pos_dim})")
    sch = model.schedule
    ab = sch.alphabars
    rngs = [nx.rng_stream(s, "sample") for s in seeds]
    positions = layout.positions()
    pad = layout.pad_mask()
    length, k = pad.shape
    out = np.zeros((b, length, k))
    cond_t = nx.Tensor(conds)
    with nx.no_grad():
        h = model.ssm.zero_state(b)
        prev = np.broadcast_to(model.start_token.data, (b, k))
        for j in range(length):
            inp = np.concatenate([prev, np.broadcast_to(positions[j], (b, positions.shape[1]))], axis=1)
            proto, h = ssm_step(model.ssm, nx.Tensor(inp), h)
            keep = (~pad[j]).astype(np.float64)
            x = np.stack([r.standard_normal(k) for r in rngs]) * keep
            for t in range(sch.T, 0, -1):
                eps_hat = model.denoiser(nx.Tensor(x), proto, cond_t, np.full(b, t), positions[j]).data.astype(np.float64)
                beta = sch.betas[t - 1]
                mean = (x - beta / math.sqrt(1.0 - ab[t]) * eps_hat) / math.sqrt(1.0 - beta)
                if t > 1:
                    z = np.stack([r.standard_normal(k) for r in rngs])
                    x = mean + math.sqrt(sch.posterior_variance(t)) * z
                else:
                    x = mean
                x = x * keep
            out[:, j] = x
            prev = x
    return [TokenSequence(out[i], positions, pad, layout) for i in range(b)]


def sample_sequence(model: DiffusionModel, condition: Condition | np.ndarray, layout: TokenLayout, seed: int) -> TokenSequence:
    c = condition.combined if isinstance(condition, Condition) else np.asarray(condition)
    return sample_sequences(model, c[None], layout, [seed])[0]


def generate_adapter(model: DiffusionModel, condition: Condition | np.ndarray, layout: TokenLayout, seed: int) -> LoraAdapter:
    return detokenize(sample_sequence(model, condition, layout, seed), provenance="generated")
