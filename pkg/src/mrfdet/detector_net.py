"""Desk-scale single-shot detector.

A small staged backbone (each stage halves resolution) feeds an SSD-style
set of detection levels at strides 8, 16, 32, ... When the extra-level
toggle is on, a top-down pathway (nearest-neighbor 2x upsample + 1x1
lateral projection, elementwise add) runs from the coarsest stage down to
stride 4, the merged features replace the bottom-up ones as detection
features, and the stride-4 merged feature becomes the finest detection
level and the input of the auxiliary segmentation head. All detection
levels except the two coarsest carry a multi-receptive-field block in
front of their 3x3 class/box prediction heads when the MRF toggle is on.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .anchors import generate_anchors
from .mrf_block import (DEFAULT_BRANCHES, MRFBlockSpec, default_mrf_spec,
                        init_mrf_params, mrf_forward, msra_init)
from .tensor_core import (ConvSpec, ShapeError, Tensor, _node, _wants_grad,
                          add, as_tensor, conv2d, relu, transposed_conv2d,
                          upsample_nearest_2x)

SEG_MODES = ("off", "aws", "sws")


@dataclass(frozen=True)
class Toggles:
    mrf: bool = True
    extra_level: bool = True
    seg_mode: str = "sws"

    def __post_init__(self):
        if self.seg_mode not in SEG_MODES:
            raise ShapeError(f"seg_mode must be one of {SEG_MODES}")
        if self.seg_mode != "off" and not self.extra_level:
            raise ShapeError("segmentation head needs the extra (stride-4) level")


@dataclass(frozen=True)
class BackboneSpec:
    image_size: int = 64
    stage_channels: tuple = (16, 32, 64, 64, 64)
    convs_per_stage: int = 2

    def __post_init__(self):
        if len(self.stage_channels) < 3:
            raise ShapeError("backbone needs at least 3 stages")
        if self.image_size % (2 ** len(self.stage_channels)) != 0:
            raise ShapeError(f"image size {self.image_size} must be divisible by "
                             f"the coarsest stride {2 ** len(self.stage_channels)}")


@dataclass(frozen=True)
class LevelSpec:
    name: str
    stride: int
    extent: int
    channels: int
    use_mrf: bool
    anchors_per_loc: int


@dataclass
class HeadOutputs:
    """Per-level prediction maps plus their flattened anchor-major views."""

    level_maps: list            # (name, loc map Tensor, conf map Tensor)
    loc: Tensor                 # (num_anchors, 4)
    conf: Tensor                # (num_anchors, num_classes + 1)
    anchors: np.ndarray         # (num_anchors, 4) corner form
    seg_logits: Tensor = None   # (2, image, image) when segmentation ran


@dataclass
class DetectorParams:
    backbone: BackboneSpec
    toggles: Toggles
    num_classes: int
    levels: list                # LevelSpec, finest first
    params: dict                # name -> Tensor, insertion-ordered
    mrf_specs: dict             # level name -> MRFBlockSpec
    anchors: np.ndarray
    seed: int

    def named_params(self):
        return list(self.params.items())

    @property
    def num_anchors(self):
        return self.anchors.shape[0]


def anchor_counts(num_levels: int):
    """4 anchors per cell on the finest and coarsest level, 6 elsewhere."""
    if num_levels == 1:
        return [4]
    return [4] + [6] * (num_levels - 2) + [4]


def anchor_scales(num_levels: int, extra_level: bool):
    """Per-level box scales as fractions of the image, plus the final bound."""
    if extra_level:
        rest = list(np.linspace(0.35, 0.85, num_levels - 1)) if num_levels > 1 else []
        return [0.1] + rest + [1.0]
    if num_levels == 1:
        return [0.5, 1.0]
    return list(np.linspace(0.2, 0.8, num_levels)) + [1.0]


def aspect_ratios_for(a: int):
    if a == 4:
        return [1.0, 2.0, 0.5]
    if a == 6:
        return [1.0, 2.0, 3.0, 0.5, 1.0 / 3.0]
    raise ShapeError(f"unsupported anchors-per-location {a} (need 4 or 6)")


def build_network(backbone: BackboneSpec, num_classes: int, toggles: Toggles,
                  branch_kds=DEFAULT_BRANCHES, seed: int = 0,
                  dtype=np.float64) -> DetectorParams:
    """Construct and initialize all parameters; fully determined by the seed."""
    rng = np.random.default_rng(seed)
    params = {}

    def conv_param(name, out_c, in_c, k, scale=1.0):
        # Prediction heads start near zero so initial boxes stay close to
        # their anchors; full-size random heads regress wildly off-image
        # boxes early on and the localization loss never recovers.
        w = msra_init(rng, (out_c, in_c, k, k), dtype) * dtype(scale)
        params[f"{name}.w"] = Tensor(w, requires_grad=True)
        params[f"{name}.b"] = Tensor(np.zeros(out_c, dtype=dtype), requires_grad=True)

    # Backbone stages: first conv of each stage downsamples by 2.
    in_c = 3
    for s, out_c in enumerate(backbone.stage_channels):
        for c in range(backbone.convs_per_stage):
            conv_param(f"backbone.s{s}.c{c}", out_c, in_c, 3)
            in_c = out_c

    n_stages = len(backbone.stage_channels)
    stage_stride = [2 ** (s + 1) for s in range(n_stages)]
    stage_extent = [backbone.image_size // st for st in stage_stride]

    if toggles.extra_level:
        det_stages = list(range(1, n_stages))          # strides 4, 8, ...
        top_c = backbone.stage_channels[-1]
        # Lateral 1x1 projections for every merged stage (all but the coarsest).
        for s in range(n_stages - 2, 0, -1):
            conv_param(f"lateral.s{s}", top_c, backbone.stage_channels[s], 1)
        level_channels = {s: (backbone.stage_channels[s] if s == n_stages - 1 else top_c)
                          for s in det_stages}
    else:
        det_stages = list(range(2, n_stages))          # strides 8, 16, ...
        level_channels = {s: backbone.stage_channels[s] for s in det_stages}

    n_levels = len(det_stages)
    per_level_a = anchor_counts(n_levels)
    levels, mrf_specs = [], {}
    for rank, s in enumerate(det_stages):
        use_mrf = toggles.mrf and rank < n_levels - 2
        name = f"level{stage_stride[s]}"
        spec = LevelSpec(name=name, stride=stage_stride[s], extent=stage_extent[s],
                         channels=level_channels[s], use_mrf=use_mrf,
                         anchors_per_loc=per_level_a[rank])
        if use_mrf:
            mspec = default_mrf_spec(spec.channels, spec.channels, branch_kds)
            if spec.extent < mspec.max_effective_kernel:
                raise ShapeError(
                    f"{name} extent {spec.extent} is smaller than the largest MRF "
                    f"effective kernel {mspec.max_effective_kernel}; disable MRF or "
                    "use a larger input")
            mrf_specs[name] = mspec
            for pname, t in init_mrf_params(mspec, rng, dtype).named(f"mrf.{name}."):
                params[pname] = t
        levels.append(spec)
        a = spec.anchors_per_loc
        conv_param(f"head.{name}.loc", a * 4, spec.channels, 3, scale=0.1)
        conv_param(f"head.{name}.conf", a * (num_classes + 1), spec.channels, 3, scale=0.1)

    if toggles.extra_level:
        # Segmentation head on the finest merged feature (stride 4):
        # two stride-2 transposed convs, 3x3 transition + ReLU, 1x1 to 2 logits.
        c0 = levels[0].channels
        params["seg.up1.w"] = Tensor(msra_init(rng, (c0, 16, 2, 2), dtype),
                                     requires_grad=True)
        params["seg.up1.b"] = Tensor(np.zeros(16, dtype=dtype), requires_grad=True)
        params["seg.up2.w"] = Tensor(msra_init(rng, (16, 8, 2, 2), dtype),
                                     requires_grad=True)
        params["seg.up2.b"] = Tensor(np.zeros(8, dtype=dtype), requires_grad=True)
        conv_param("seg.transition", 8, 8, 3)
        conv_param("seg.cls", 2, 8, 1)

    scales = [sc * backbone.image_size
              for sc in anchor_scales(n_levels, toggles.extra_level)]
    anchors = generate_anchors([lv.extent for lv in levels], scales,
                               [aspect_ratios_for(lv.anchors_per_loc) for lv in levels],
                               backbone.image_size)
    return DetectorParams(backbone=backbone, toggles=toggles, num_classes=num_classes,
                          levels=levels, params=params, mrf_specs=mrf_specs,
                          anchors=anchors, seed=seed)


def fpn_merge(top_feature, lateral_feature, lateral_proj_w, lateral_proj_b) -> Tensor:
    """upsample_nearest_2x(top) + 1x1-projected lateral, elementwise."""
    top = as_tensor(top_feature)
    lat = as_tensor(lateral_feature)
    if lat.shape[1] != 2 * top.shape[1] or lat.shape[2] != 2 * top.shape[2]:
        raise ShapeError(f"lateral extent {lat.shape[1:]} is not twice the top "
                         f"extent {top.shape[1:]}")
    w = as_tensor(lateral_proj_w)
    spec = ConvSpec(lat.shape[0], w.shape[0], 1)
    return add([upsample_nearest_2x(top), conv2d(lat, w, lateral_proj_b, spec)])


def _conv_relu(x, params, name, stride=1):
    w = params[f"{name}.w"]
    spec = ConvSpec(x.shape[0], w.shape[0], 3, stride=stride, padding=1)
    return relu(conv2d(x, w, params[f"{name}.b"], spec))


def _head_conv(x, params, name):
    w = params[f"{name}.w"]
    spec = ConvSpec(x.shape[0], w.shape[0], 3, padding=1)
    return conv2d(x, w, params[f"{name}.b"], spec)


def flatten_level_maps(maps, per_anchor: int) -> Tensor:
    """Stack per-level (A*K, S, S) maps into one (total_anchors, K) tensor.

    Anchor order matches generate_anchors: level by level, cells row-major,
    anchor index within the cell innermost.
    """
    k = per_anchor
    ts = [as_tensor(m) for m in maps]
    flats, meta = [], []
    for t in ts:
        c, s1, s2 = t.shape
        a = c // k
        if a * k != c:
            raise ShapeError(f"head map channels {c} not divisible by {k}")
        flats.append(t.data.reshape(a, k, s1, s2).transpose(2, 3, 0, 1).reshape(-1, k))
        meta.append((a, s1, s2))
    out = _node(np.concatenate(flats, axis=0), ts)
    sizes = [a * s1 * s2 for a, s1, s2 in meta]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        for t, (a, s1, s2), gp in zip(ts, meta, np.split(g, splits, axis=0)):
            if _wants_grad(t):
                t._accumulate(gp.reshape(s1, s2, a, k).transpose(2, 3, 0, 1)
                              .reshape(a * k, s1, s2))
    out._backward = bwd
    return out


def seg_head_forward(det: DetectorParams, finest_feature) -> Tensor:
    """stride 4 -> 2 -> 1 via two transposed convs, then transition + classifier."""
    p = det.params
    x = as_tensor(finest_feature)
    if x.shape[1] * 4 != det.backbone.image_size:
        raise ShapeError(f"segmentation head expects a stride-4 feature, got extent "
                         f"{x.shape[1]} for image size {det.backbone.image_size}")
    up1 = relu(transposed_conv2d(x, p["seg.up1.w"], p["seg.up1.b"],
                                 ConvSpec(x.shape[0], 16, 2, stride=2)))
    up2 = relu(transposed_conv2d(up1, p["seg.up2.w"], p["seg.up2.b"],
                                 ConvSpec(16, 8, 2, stride=2)))
    trans = _conv_relu(up2, p, "seg.transition")
    return conv2d(trans, p["seg.cls.w"], p["seg.cls.b"], ConvSpec(8, 2, 1))


def forward(det: DetectorParams, image, with_seg=None):
    """Full forward pass: (FeaturePyramid, HeadOutputs).

    FeaturePyramid is the list of (level name, stride, feature Tensor),
    finest first. with_seg overrides whether the segmentation head runs;
    by default it runs iff the seg_mode toggle is not "off".
    """
    x = as_tensor(image)
    size = det.backbone.image_size
    if x.shape != (3, size, size):
        raise ShapeError(f"image must be (3, {size}, {size}), got {x.shape}")
    p = det.params
    stages = []
    for s in range(len(det.backbone.stage_channels)):
        for c in range(det.backbone.convs_per_stage):
            x = _conv_relu(x, p, f"backbone.s{s}.c{c}", stride=2 if c == 0 else 1)
        stages.append(x)

    n_stages = len(stages)
    by_stride = {}
    if det.toggles.extra_level:
        top = stages[-1]
        by_stride[2 ** n_stages] = top
        for s in range(n_stages - 2, 0, -1):
            top = fpn_merge(top, stages[s], p[f"lateral.s{s}.w"], p[f"lateral.s{s}.b"])
            by_stride[2 ** (s + 1)] = top
    else:
        for s in range(2, n_stages):
            by_stride[2 ** (s + 1)] = stages[s]

    pyramid, level_maps, loc_flats, conf_flats = [], [], [], []
    for lv in det.levels:
        feat = by_stride[lv.stride]
        pyramid.append((lv.name, lv.stride, feat))
        if lv.use_mrf:
            feat = mrf_forward(_mrf_params_view(det, lv.name), det.mrf_specs[lv.name], feat)
        loc_map = _head_conv(feat, p, f"head.{lv.name}.loc")
        conf_map = _head_conv(feat, p, f"head.{lv.name}.conf")
        level_maps.append((lv.name, loc_map, conf_map))
        loc_flats.append(flatten_level_maps([loc_map], 4))
        conf_flats.append(flatten_level_maps([conf_map], det.num_classes + 1))

    loc = _concat_rows(loc_flats)
    conf = _concat_rows(conf_flats)

    seg_logits = None
    run_seg = det.toggles.seg_mode != "off" if with_seg is None else with_seg
    if run_seg:
        if not det.toggles.extra_level:
            raise ShapeError("segmentation head requires the extra level")
        seg_logits = seg_head_forward(det, pyramid[0][2])

    outputs = HeadOutputs(level_maps=level_maps, loc=loc, conf=conf,
                          anchors=det.anchors, seg_logits=seg_logits)
    return pyramid, outputs


def _concat_rows(tensors):
    ts = [as_tensor(t) for t in tensors]
    out = _node(np.concatenate([t.data for t in ts], axis=0), ts)
    splits = np.cumsum([t.shape[0] for t in ts])[:-1]

    def bwd(g):
        for t, gp in zip(ts, np.split(g, splits, axis=0)):
            if _wants_grad(t):
                t._accumulate(gp)
    out._backward = bwd
    return out


def _mrf_params_view(det: DetectorParams, level_name: str):
    from .mrf_block import MRFBlockParams
    p = det.params
    pre = f"mrf.{level_name}."
    spec = det.mrf_specs[level_name]
    kwargs = dict(
        bottleneck_w=p[pre + "bottleneck.w"], bottleneck_b=p[pre + "bottleneck.b"],
        branch_w=[p[pre + f"branch{i}.w"] for i in range(len(spec.branches))],
        branch_b=[p[pre + f"branch{i}.b"] for i in range(len(spec.branches))],
        fuse_w=p[pre + "fuse.w"], fuse_b=p[pre + "fuse.b"],
    )
    if spec.needs_projection:
        kwargs["projection_w"] = p[pre + "proj.w"]
        kwargs["projection_b"] = p[pre + "proj.b"]
    return MRFBlockParams(**kwargs)


def describe(det: DetectorParams) -> str:
    """Human-readable architecture summary for the CLI."""
    lines = [f"input: 3 x {det.backbone.image_size} x {det.backbone.image_size}",
             f"backbone stages: {det.backbone.stage_channels} "
             f"({det.backbone.convs_per_stage} convs each, stride 2 per stage)",
             f"toggles: mrf={det.toggles.mrf} extra_level={det.toggles.extra_level} "
             f"seg_mode={det.toggles.seg_mode}",
             "level      stride  extent  channels  mrf  A  loc_ch  conf_ch"]
    for lv in det.levels:
        lines.append(f"{lv.name:<9}  {lv.stride:>6}  {lv.extent:>6}  {lv.channels:>8}  "
                     f"{'yes' if lv.use_mrf else 'no ':<3}  {lv.anchors_per_loc}  "
                     f"{lv.anchors_per_loc * 4:>6}  "
                     f"{lv.anchors_per_loc * (det.num_classes + 1):>7}")
    lines.append(f"anchors total: {det.num_anchors}")
    if det.toggles.extra_level:
        lines.append("segmentation head: 2x transposed conv (stride 2) + 3x3 transition "
                     "+ ReLU + 1x1 -> 2 logits at full image resolution")
    n_params = sum(t.data.size for _, t in det.named_params())
    lines.append(f"parameters: {n_params}")
    return "\n".join(lines)
