"""One-branch fully convolutional layer-separation network.

Layout: 3 head convs, 13 residual blocks (26 convs), 3 tail convs = 32 convs,
all 3x3 with 64 channels except the final 64->3 projection. Every conv but
the last is followed by instance normalization and ReLU.

The affine parameters of the *first* instance norm are not part of the
network. They live in :class:`LatentCode` objects (64 scales + 64 shifts), and
choosing the background or the reflection code switches what the network
outputs. Everything else is shared.
"""

from __future__ import annotations

import os
import tempfile
from dataclasses import asdict, dataclass
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

from ._validation import CheckpointError, ConfigError, OwnershipError, ShapeError

ROLES = ("background", "reflection")
VARIANTS = ("latent_code", "split_feature", "six_channel", "two_network")
CHECKPOINT_VERSION = 1
IN_EPS = 1e-5


@dataclass(frozen=True)
class NetConfig:
    variant: str = "latent_code"
    total_convs: int = 32
    res_blocks: int = 13
    width: int = 64
    kernel: int = 3
    code_layer_index: int = 1
    model_tags: tuple = (None,)

    def validate(self):
        errors = []
        if self.variant not in VARIANTS:
            errors.append(f"variant: unknown value {self.variant!r}")
        if self.total_convs != 32:
            errors.append("total_convs: must be 32")
        if self.res_blocks != 13:
            errors.append("res_blocks: must be 13")
        if self.width != 64:
            errors.append("width: must be 64")
        if self.kernel != 3:
            errors.append("kernel: must be 3")
        if self.code_layer_index != 1:
            errors.append("code_layer_index: must be 1")
        if not self.model_tags:
            errors.append("model_tags: need at least one entry")
        if self.variant != "latent_code" and tuple(self.model_tags) != (None,):
            errors.append("model_tags: per-model codes need the latent_code variant")
        if errors:
            raise ConfigError(errors)
        return self

    @property
    def out_channels(self):
        return 6 if self.variant == "six_channel" else 3

    def to_dict(self):
        d = asdict(self)
        d["model_tags"] = list(self.model_tags)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["model_tags"] = tuple(d.get("model_tags", (None,)))
        return cls(**d)


class LatentCode(nn.Module):
    """Scale/shift pair for the first instance-norm layer (128 values)."""

    def __init__(self, role, model_tag=None, width=64):
        super().__init__()
        if role not in ROLES:
            raise ValueError(f"role must be one of {ROLES}, got {role!r}")
        self.role = role
        self.model_tag = model_tag
        self.scale = nn.Parameter(torch.ones(width))
        self.shift = nn.Parameter(torch.zeros(width))

    @property
    def key(self):
        return code_key(self.role, self.model_tag)

    def extra_repr(self):
        return f"role={self.role}, model_tag={self.model_tag}"


def code_key(role, model_tag=None):
    return role if model_tag is None else f"{role}@{model_tag}"


def _conv(cin, cout):
    return nn.Conv2d(cin, cout, 3, padding=1, padding_mode="reflect")


class ResBlock(nn.Module):
    def __init__(self, width):
        super().__init__()
        self.conv1 = _conv(width, width)
        self.norm1 = nn.InstanceNorm2d(width, affine=True, eps=IN_EPS)
        self.conv2 = _conv(width, width)
        self.norm2 = nn.InstanceNorm2d(width, affine=True, eps=IN_EPS)

    def forward(self, x):
        y = F.relu(self.norm1(self.conv1(x)))
        y = self.norm2(self.conv2(y))
        return F.relu(x + y)


class Trunk(nn.Module):
    """The 32-conv body. ``first_affine`` gives the first norm its own weights."""

    def __init__(self, width=64, res_blocks=13, out_channels=3, first_affine=False):
        super().__init__()
        self.width = width
        self.conv_in = _conv(3, width)
        self.first_affine = first_affine
        if first_affine:
            self.first_scale = nn.Parameter(torch.ones(width))
            self.first_shift = nn.Parameter(torch.zeros(width))
        self.head = nn.Sequential(
            _conv(width, width), nn.InstanceNorm2d(width, affine=True, eps=IN_EPS), nn.ReLU(),
            _conv(width, width), nn.InstanceNorm2d(width, affine=True, eps=IN_EPS), nn.ReLU(),
        )
        self.blocks = nn.Sequential(*[ResBlock(width) for _ in range(res_blocks)])
        self.tail = nn.Sequential(
            _conv(width, width), nn.InstanceNorm2d(width, affine=True, eps=IN_EPS), nn.ReLU(),
            _conv(width, width), nn.InstanceNorm2d(width, affine=True, eps=IN_EPS), nn.ReLU(),
        )
        self.conv_out = _conv(width, out_channels)

    def normalized(self, x):
        """First conv followed by the parameter-free instance normalization."""
        return F.instance_norm(self.conv_in(x), eps=IN_EPS)

    def features(self, x, scale=None, shift=None):
        """Activation right after the first instance norm's affine transform."""
        if scale is None:
            scale, shift = self.first_scale, self.first_shift
        if scale.ndim == 1:
            scale, shift = scale[None], shift[None]
        return self.normalized(x) * scale[:, :, None, None] + shift[:, :, None, None]

    def from_features(self, h, feature_mask=None):
        if feature_mask is not None:
            h = h * feature_mask
        h = F.relu(h)
        return self.conv_out(self.tail(self.blocks(self.head(h))))

    def forward(self, x, scale=None, shift=None, feature_mask=None):
        return self.from_features(self.features(x, scale, shift), feature_mask)

    def count_convs(self):
        return sum(isinstance(m, nn.Conv2d) for m in self.modules())


class ReflectionNet(nn.Module):
    """Container for every architecture variant.

    ``latent_code``: one trunk, codes in ``self.codes`` keyed ``role`` or
    ``role@model_tag``. ``split_feature``: one trunk, half of the first-layer
    features zeroed per role. ``six_channel``: one trunk with a 6-channel
    output (background first). ``two_network``: one trunk per role.
    """

    def __init__(self, config: NetConfig):
        super().__init__()
        self.config = config.validate()
        c = config
        if c.variant == "two_network":
            self.nets = nn.ModuleDict({
                role: Trunk(c.width, c.res_blocks, 3, first_affine=True) for role in ROLES
            })
        else:
            self.trunk = Trunk(c.width, c.res_blocks, c.out_channels,
                               first_affine=c.variant != "latent_code")
        self.codes = nn.ModuleDict()
        if c.variant == "latent_code":
            for tag in c.model_tags:
                for role in ROLES:
                    code = LatentCode(role, tag, c.width)
                    self.codes[code.key] = code

    @property
    def variant(self):
        return self.config.variant

    def get_code(self, role, model_tag=None) -> LatentCode:
        key = code_key(role, model_tag)
        if key not in self.codes:
            raise OwnershipError(f"network has no latent code {key!r}; "
                                 f"available: {sorted(self.codes)}")
        return self.codes[key]

    def shared_parameters(self):
        """Parameters common to every role (excludes latent codes)."""
        owned = {id(p) for p in self.codes.parameters()}
        return [p for p in self.parameters() if id(p) not in owned]

    def _check_input(self, x):
        if x.ndim != 4 or x.shape[1] != 3:
            raise ShapeError(f"expected input of shape (N, 3, H, W), got {tuple(x.shape)}")

    def _check_code(self, code):
        if not isinstance(code, LatentCode):
            raise OwnershipError(f"expected a LatentCode, got {type(code).__name__}")
        owned = self.codes[code.key] if code.key in self.codes else None
        if owned is not code:
            raise OwnershipError(f"latent code {code.key!r} does not belong to this network")

    def forward(self, x, code: LatentCode, feature_mask=None):
        """Run the shared trunk with one of this network's latent codes."""
        if self.variant != "latent_code":
            raise ConfigError(f"forward with a latent code needs the latent_code variant, "
                              f"this network is {self.variant!r}")
        self._check_input(x)
        self._check_code(code)
        return self.trunk(x, code.scale, code.shift, feature_mask)

    def forward_codes(self, x, scale, shift):
        """Per-sample codes: ``scale`` and ``shift`` have shape ``(N, 64)``."""
        self._check_input(x)
        return self.trunk(x, scale, shift)

    def split_mask(self, role, like):
        half = self.config.width // 2
        mask = torch.ones(1, self.config.width, 1, 1, dtype=like.dtype, device=like.device)
        if role == "background":
            mask[:, half:] = 0
        else:
            mask[:, :half] = 0
        return mask

    def forward_variant(self, x, role):
        """Role-selected output for the non-latent-code variants."""
        if self.variant == "latent_code":
            raise ConfigError("use forward(x, code) for the latent_code variant")
        if role not in ROLES:
            raise ValueError(f"role must be one of {ROLES}, got {role!r}")
        self._check_input(x)
        if self.variant == "split_feature":
            return self.trunk(x, feature_mask=self.split_mask(role, x))
        if self.variant == "six_channel":
            out = self.trunk(x)
            return out[:, :3] if role == "background" else out[:, 3:]
        return self.nets[role](x)

    def predict(self, x, role, model_tag=None):
        """Role-selected output for any variant."""
        if self.variant == "latent_code":
            return self.forward(x, self.get_code(role, model_tag))
        return self.forward_variant(x, role)

    def predict_both(self, x, model_tag=None):
        """``(background, reflection)`` for a batch, in as few passes as the variant allows."""
        if self.variant == "six_channel":
            out = self.trunk(x)
            return out[:, :3], out[:, 3:]
        return self.predict(x, "background", model_tag), self.predict(x, "reflection", model_tag)

    def first_layer_activation(self, x, role, model_tag=None):
        """First-layer output after the split (if any) and ReLU, for inspection."""
        if self.variant == "latent_code":
            code = self.get_code(role, model_tag)
            h = self.trunk.features(x, code.scale, code.shift)
        elif self.variant == "two_network":
            h = self.nets[role].features(x)
        else:
            h = self.trunk.features(x)
            if self.variant == "split_feature":
                h = h * self.split_mask(role, x)
        return F.relu(h)


def build_network(cfg: NetConfig | None = None, seed: int = 0) -> ReflectionNet:
    """Deterministically initialized network for ``cfg``."""
    cfg = cfg or NetConfig()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        net = ReflectionNet(cfg)
    return net


def parameter_count(net: ReflectionNet) -> dict:
    shared = sum(p.numel() for p in net.shared_parameters())
    codes = sum(p.numel() for p in net.codes.parameters())
    return {"shared": shared, "codes": codes, "total": shared + codes}


def mode_parameters(net: ReflectionNet, role, model_tag=None) -> torch.Tensor:
    """Flat vector of every parameter used when running in ``role`` mode."""
    code = net.get_code(role, model_tag)
    parts = [p.detach().reshape(-1) for p in net.shared_parameters()]
    parts += [code.scale.detach(), code.shift.detach()]
    return torch.cat(parts)


def save_checkpoint(net: ReflectionNet, path, extra=None) -> Path:
    """Atomically write weights, codes and config to one archive."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    shared = {k: v for k, v in net.state_dict().items() if not k.startswith("codes.")}
    codes = {key: {"role": c.role, "model_tag": c.model_tag,
                   "scale": c.scale.detach().clone(), "shift": c.shift.detach().clone()}
             for key, c in net.codes.items()}
    payload = {"format_version": CHECKPOINT_VERSION, "config": net.config.to_dict(),
               "shared": shared, "codes": codes, "extra": extra or {}}
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    os.close(fd)
    try:
        torch.save(payload, tmp)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.remove(tmp)
    return path


def load_checkpoint(path, with_extra=False):
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint {path} does not exist")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:
        raise CheckpointError(f"could not read checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or "format_version" not in payload:
        raise CheckpointError(f"{path} is not a layersplit checkpoint")
    if payload["format_version"] != CHECKPOINT_VERSION:
        raise CheckpointError(f"checkpoint version {payload['format_version']} "
                              f"is not supported (expected {CHECKPOINT_VERSION})")
    try:
        net = ReflectionNet(NetConfig.from_dict(payload["config"]))
        state = dict(payload["shared"])
        for key, c in payload["codes"].items():
            state[f"codes.{key}.scale"] = c["scale"]
            state[f"codes.{key}.shift"] = c["shift"]
        net.load_state_dict(state, strict=True)
    except (KeyError, RuntimeError, TypeError) as exc:
        raise CheckpointError(f"corrupt checkpoint {path}: {exc}") from exc
    net.eval()
    if with_extra:
        return net, payload.get("extra", {})
    return net
