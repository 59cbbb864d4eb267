"""Scale-wise autoregressive transformer over token pyramids.

One sequence position per pyramid cell plus a start position. The model
factorizes the pyramid coarse to fine: all positions of scale i are
predicted in parallel from scales 1..i-1, so a full teacher-forced pass
needs a single forward and sequential generation needs one forward per
scale. Attention is block-causal: a query at scale i sees every position
at scales <= i, including all of its own scale (bidirectional within a
scale), and every position sees the start token.

Inputs follow the scale-shift convention: the positions of scale i carry
a projection of the previous map upsampled to side h_i, so the network
always predicts the next scale from a blurry rendition of the current
one. Scale 1 has no previous map; its positions carry the class
conditioning vector, as does the start position.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigurationError, UnsupportedError
from .pyramid import LatentPyramid, ScaleSchedule, upsample
from .rng import torch_stream


@dataclass(frozen=True)
class GeneratorConfig:
    depth: int = 4
    width: int = 64
    heads: int = 4
    vocab: int = 64          # 0 selects the continuous regression head
    latent_dim: int = 8
    classes: int = 4
    label_drop_prob: float = 0.1

    def __post_init__(self):
        if self.depth < 1 or self.width < 1 or self.heads < 1:
            raise ConfigurationError("depth, width and heads must be >= 1")
        if self.width % self.heads != 0:
            raise ConfigurationError(f"width {self.width} not divisible by heads {self.heads}")
        if self.vocab < 0:
            raise ConfigurationError("vocab must be >= 0 (0 means continuous)")
        if self.latent_dim < 1 or self.classes < 1:
            raise ConfigurationError("latent_dim and classes must be >= 1")
        if not 0.0 <= self.label_drop_prob <= 1.0:
            raise ConfigurationError("label_drop_prob must lie in [0, 1]")

    @property
    def discrete(self) -> bool:
        return self.vocab > 0

    @property
    def out_dim(self) -> int:
        return self.vocab if self.discrete else self.latent_dim


@dataclass(frozen=True)
class SequenceLayout:
    """Mapping between pyramid scales and flat sequence positions.

    Position 0 is the start token (scale index 0). Scale i then occupies
    the half-open range [offsets[i-1], offsets[i-1] + sides[i-1]^2).
    """

    schedule: ScaleSchedule
    length: int
    offsets: tuple[int, ...]
    scale_of: tuple[int, ...]

    def span(self, i: int) -> tuple[int, int]:
        h = self.schedule.side(i)
        start = self.offsets[i - 1]
        return start, start + h * h

    def prefix_length(self, i: int) -> int:
        """Sequence length covering the start token and scales 1..i."""
        start, stop = self.span(i)
        return stop


def build_layout(schedule: ScaleSchedule) -> SequenceLayout:
    offsets = []
    pos = 1
    scale_of = [0]
    for idx, h in enumerate(schedule.sides, start=1):
        offsets.append(pos)
        scale_of.extend([idx] * (h * h))
        pos += h * h
    return SequenceLayout(
        schedule=schedule,
        length=pos,
        offsets=tuple(offsets),
        scale_of=tuple(scale_of),
    )


def build_attention_mask(layout: SequenceLayout) -> torch.Tensor:
    """Boolean [L, L] mask, True where query position q may attend to k."""
    scale = torch.tensor(layout.scale_of)
    return scale.unsqueeze(1) >= scale.unsqueeze(0)


class Block(nn.Module):
    def __init__(self, width: int, heads: int):
        super().__init__()
        self.heads = heads
        self.ln1 = nn.LayerNorm(width)
        self.qkv = nn.Linear(width, 3 * width)
        self.proj = nn.Linear(width, width)
        self.ln2 = nn.LayerNorm(width)
        self.fc1 = nn.Linear(width, 4 * width)
        self.fc2 = nn.Linear(4 * width, width)

    def attend(self, x: torch.Tensor, allow: torch.Tensor) -> torch.Tensor:
        b, t, w = x.shape
        hd = w // self.heads
        q, k, v = self.qkv(x).split(w, dim=2)
        q = q.view(b, t, self.heads, hd).transpose(1, 2)
        k = k.view(b, t, self.heads, hd).transpose(1, 2)
        v = v.view(b, t, self.heads, hd).transpose(1, 2)
        att = (q @ k.transpose(-2, -1)) / math.sqrt(hd)
        att = att.masked_fill(~allow, float("-inf"))
        att = F.softmax(att, dim=-1)
        y = (att @ v).transpose(1, 2).reshape(b, t, w)
        return self.proj(y)

    def forward(self, x: torch.Tensor, allow: torch.Tensor) -> torch.Tensor:
        x = x + self.attend(self.ln1(x), allow)
        x = x + self.fc2(F.gelu(self.fc1(self.ln2(x))))
        return x


class Generator(nn.Module):
    """Transformer over a fixed scale schedule.

    ``nfe`` counts forward invocations of the sequence backbone since the
    last ``reset_nfe``; every training scheme and sampler reports cost in
    these units.
    """

    def __init__(self, config: GeneratorConfig, schedule: ScaleSchedule):
        super().__init__()
        self.config = config
        self.schedule = schedule
        self.layout = build_layout(schedule)
        self.register_buffer("attn_mask", build_attention_mask(self.layout), persistent=False)
        w = config.width
        # class index config.classes is the null label used for classifier-free guidance
        self.class_emb = nn.Embedding(config.classes + 1, w)
        self.start_emb = nn.Parameter(torch.zeros(w))
        self.pos_emb = nn.Parameter(torch.zeros(self.layout.length, w))
        # input_proj[i-1] embeds the map feeding scale i; scale 1 takes its
        # projection only on the masked-coarse path, where token embeddings
        # replace the class broadcast
        self.input_proj = nn.ModuleList(
            [nn.Linear(config.latent_dim, w) for _ in schedule.sides]
        )
        self.mask_emb = nn.Parameter(torch.zeros(w))
        self.blocks = nn.ModuleList([Block(w, config.heads) for _ in range(config.depth)])
        self.ln_f = nn.LayerNorm(w)
        self.head = nn.Linear(w, config.out_dim)
        self.nfe = 0

    # -- bookkeeping --------------------------------------------------------

    def reset_nfe(self) -> None:
        self.nfe = 0

    def effective_labels(self, label: torch.Tensor, drop: torch.Tensor | None) -> torch.Tensor:
        label = torch.as_tensor(label, dtype=torch.long)
        if label.ndim == 0:
            label = label.unsqueeze(0)
        if (label < 0).any() or (label >= self.config.classes).any():
            raise ConfigurationError("label out of range")
        if drop is None:
            return label
        drop = torch.as_tensor(drop, dtype=torch.bool)
        return torch.where(drop, torch.full_like(label, self.config.classes), label)

    # -- core forward -------------------------------------------------------

    def _run(self, seq: torch.Tensor, use_pos: bool) -> torch.Tensor:
        t = seq.shape[1]
        if use_pos:
            seq = seq + self.pos_emb[:t].to(seq.dtype)
        allow = self.attn_mask[:t, :t]
        x = seq
        for block in self.blocks:
            x = block(x, allow)
        x = self.ln_f(x)
        out = self.head(x)
        self.nfe += 1
        return out

    def assemble(
        self,
        label: torch.Tensor,
        maps: list[torch.Tensor],
        drop: torch.Tensor | None,
        scale_one: torch.Tensor | None = None,
    ) -> torch.Tensor:
        """Build the input sequence for scales 1..len(maps)+1.

        ``maps`` holds the conditioning maps f_1..f_m (any mix of ground
        truth and sampled latents); the sequence then covers predictions
        for scales 1..m+1. ``scale_one`` optionally overrides the scale-1
        input positions with precomputed embeddings [B, h1*h1, width]
        (masked-coarse path).
        """
        eff = self.effective_labels(label, drop)
        b = eff.shape[0]
        upto = len(maps) + 1
        if upto > self.schedule.num_scales:
            raise ConfigurationError("more conditioning maps than scales")
        cond = self.class_emb(eff) + self.start_emb
        parts = [cond.unsqueeze(1)]
        h1 = self.schedule.side(1)
        if scale_one is None:
            parts.append(cond.unsqueeze(1).expand(b, h1 * h1, -1))
        else:
            parts.append(scale_one)
        for i in range(2, upto + 1):
            h = self.schedule.side(i)
            shifted = upsample(maps[i - 2], h)
            flat = shifted.reshape(b, h * h, self.config.latent_dim)
            parts.append(self.input_proj[i - 1](flat.to(self.pos_emb.dtype)))
        return torch.cat(parts, dim=1)

    def _split_scales(self, out: torch.Tensor, upto: int) -> list[torch.Tensor]:
        preds = []
        b = out.shape[0]
        for i in range(1, upto + 1):
            start, stop = self.layout.span(i)
            h = self.schedule.side(i)
            preds.append(out[:, start:stop].reshape(b, h, h, self.config.out_dim))
        return preds

    # -- public passes ------------------------------------------------------

    def forward_tf(
        self,
        label: torch.Tensor,
        pyramid: LatentPyramid | list[torch.Tensor],
        drop: torch.Tensor | None = None,
        use_pos: bool = True,
    ) -> list[torch.Tensor]:
        """Parallel pass over all scales; one forward invocation.

        Conditioning maps are taken from scales 1..N-1 of ``pyramid`` (a
        LatentPyramid or a plain list holding at least N-1 maps). Returns
        per-scale predictions, each [B, h_i, h_i, out_dim].
        """
        maps = pyramid.maps if isinstance(pyramid, LatentPyramid) else pyramid
        n = self.schedule.num_scales
        seq = self.assemble(label, list(maps[: n - 1]), drop)
        out = self._run(seq, use_pos)
        return self._split_scales(out, n)

    def forward_prefix(
        self,
        label: torch.Tensor,
        maps: list[torch.Tensor],
        drop: torch.Tensor | None = None,
        use_pos: bool = True,
    ) -> torch.Tensor:
        """Predict scale len(maps)+1 from the given earlier maps."""
        i = len(maps) + 1
        seq = self.assemble(label, maps, drop)
        out = self._run(seq, use_pos)
        return self._split_scales(out, i)[i - 1]

    def forward_masked(
        self,
        label: torch.Tensor,
        pyramid: LatentPyramid | list[torch.Tensor],
        masked: torch.Tensor,
        drop: torch.Tensor | None = None,
        use_pos: bool = True,
    ) -> list[torch.Tensor]:
        """Parallel pass with masked token inputs at scale 1.

        Scale-1 positions carry embeddings of their own (dequantized)
        map instead of the class broadcast; positions flagged in the
        boolean ``masked`` [B, h1*h1] receive a learned mask embedding.
        The block-causal mask already lets scale 1 attend to itself
        bidirectionally, which is what masked prediction needs. Scales
        2..N keep the usual shifted inputs. Discrete mode only.
        """
        if not self.config.discrete:
            raise UnsupportedError("masked coarse prediction is defined for the discrete pathway")
        maps = pyramid.maps if isinstance(pyramid, LatentPyramid) else pyramid
        n = self.schedule.num_scales
        h1 = self.schedule.side(1)
        latent_one = maps[0]
        b = latent_one.shape[0]
        flat = latent_one.reshape(b, h1 * h1, self.config.latent_dim)
        emb = self.input_proj[0](flat.to(self.pos_emb.dtype))
        emb = torch.where(masked.unsqueeze(-1), self.mask_emb.to(emb.dtype), emb)
        seq = self.assemble(label, list(maps[: n - 1]), drop, scale_one=emb)
        out = self._run(seq, use_pos)
        return self._split_scales(out, n)


def init_params(model: Generator, seed: int) -> Generator:
    """Seeded init: truncated normal (std 0.02) weights, zero biases,
    zero output head so the initial logits are exactly uniform."""
    gen = torch_stream(seed, "init")
    for name, p in model.named_parameters():
        owner = name.split(".")[-2] if "." in name else ""
        with torch.no_grad():
            if name.startswith("head.") or name.endswith("bias") or name in ("start_emb", "mask_emb"):
                p.zero_()
            elif owner.startswith("ln"):
                p.fill_(1.0)  # LayerNorm gains
            else:
                nn.init.trunc_normal_(p, mean=0.0, std=0.02, a=-0.04, b=0.04, generator=gen)
    return model


def param_count(config: GeneratorConfig, schedule: ScaleSchedule) -> int:
    """Closed-form parameter count; kept in sync with the module tree by a
    unit test so config sizing can be done without instantiation."""
    w = config.width
    layout_len = 1 + schedule.token_count
    n = schedule.num_scales
    per_block = (3 * w * w + 3 * w) + (w * w + w) + 2 * (2 * w) + (4 * w * w + 4 * w) + (4 * w * w + w)
    total = (config.classes + 1) * w            # class embedding
    total += w                                   # start embedding
    total += layout_len * w                      # positional embeddings
    total += n * (config.latent_dim * w + w)     # per-scale input projections
    total += w                                   # mask embedding
    total += config.depth * per_block
    total += 2 * w                               # final norm
    total += w * config.out_dim + config.out_dim
    return total
