"""Exact parameter and FLOP accounting.

Convention: one multiply-accumulate is 2 FLOPs. A convolution costs
``2 * D*H*W * C_in * C_out * kernel_volume`` per sample (bias adds are not
counted). Normalisation, ReLU and pooling cost 1 FLOP per output/input
element; upsampling and Group Shift cost 0 FLOPs. Group Shift is pure data
movement, reported in ``moved_bytes`` (one float64 read and write per element).
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass

from .network import ConvKind, Network, NetworkSpec, StageSpec, build_network

FLOP_CONVENTION = (
    "FLOPs: 1 MAC = 2 FLOPs; conv = 2*DHW*Cin*Cout*k^3 per sample; norm/relu/pool = 1 per element; "
    "upsample/GS = 0 (GS moved_bytes = 16 per element)"
)
KERNEL_VOLUME = {"pointwise": 1, "conv3": 27}


@dataclass
class CostRow:
    name: str
    kind: str
    params: int
    flops: int
    moved_bytes: int = 0


def _layer_params(info) -> int:
    if info.kind in KERNEL_VOLUME:
        return KERNEL_VOLUME[info.kind] * info.c_in * info.c_out + info.c_out
    if info.kind == "norm":
        return 2 * info.c_out
    return 0


def count_params(net: Network) -> tuple[list[CostRow], int]:
    rows = [CostRow(i.name, i.kind, _layer_params(i), 0) for i in net.info]
    return rows, sum(r.params for r in rows)


def count_flops(net: Network, input_dims) -> tuple[list[CostRow], int]:
    """Per-layer FLOPs for a batch of shape ``input_dims = (N, D, H, W, C)``."""
    N, D, H, W = (int(v) for v in tuple(input_dims)[:4])
    if (D, H, W) != net.input_dims:
        net = build_network(net.spec, (D, H, W), tables=False)
    rows = []
    for i in net.info:
        out_d = i.out_dims
        in_d = i.in_dims
        vox = out_d[0] * out_d[1] * out_d[2]
        moved = 0
        if i.kind in KERNEL_VOLUME:
            flops = 2 * vox * i.c_in * i.c_out * KERNEL_VOLUME[i.kind]
        elif i.kind in ("norm", "relu"):
            flops = vox * out_d[3]
        elif i.kind == "pool":
            flops = in_d[0] * in_d[1] * in_d[2] * in_d[3]
        elif i.kind == "gs":
            flops = 0
            moved = 16 * vox * out_d[3]
        else:
            flops = 0
        rows.append(CostRow(i.name, i.kind, _layer_params(i), N * flops, N * moved))
    return rows, sum(r.flops for r in rows)


def profile(net: Network, input_dims) -> list[CostRow]:
    rows, _ = count_flops(net, input_dims)
    return rows


def as_conv3(spec: NetworkSpec) -> NetworkSpec:
    """Same network with every stage convolution swapped for 3x3x3."""
    return spec.with_(stages=[StageSpec(s.channels, s.groups, ConvKind.CONV3) for s in spec.stages])


def as_pointwise(spec: NetworkSpec) -> NetworkSpec:
    return spec.with_(stages=[StageSpec(s.channels, s.groups, ConvKind.POINTWISE) for s in spec.stages])


def rows_to_csv(rows: list[CostRow]) -> str:
    buf = io.StringIO()
    buf.write(f"# {FLOP_CONVENTION}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["layer", "kind", "params", "flops", "moved_bytes"])
    for r in rows:
        w.writerow([r.name, r.kind, r.params, r.flops, r.moved_bytes])
    w.writerow(["TOTAL", "", sum(r.params for r in rows), sum(r.flops for r in rows), sum(r.moved_bytes for r in rows)])
    return buf.getvalue()


def _ratio(a: int, b: int) -> str:
    return f"{a / b:.4f}" if b else ""


@dataclass
class CompareReport:
    header: list[str]
    rows: list[list]
    totals: dict

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(f"# {FLOP_CONVENTION}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.header)
        w.writerows(self.rows)
        return buf.getvalue()

    def to_text(self) -> str:
        table = [self.header] + [[str(c) for c in r] for r in self.rows]
        widths = [max(len(r[i]) for r in table) for i in range(len(self.header))]
        lines = [FLOP_CONVENTION]
        for r in table:
            lines.append("  ".join(c.rjust(wd) if j > 1 else c.ljust(wd) for j, (c, wd) in enumerate(zip(r, widths))))
        return "\n".join(lines) + "\n"


def compare_report(spec: NetworkSpec, input_dims) -> CompareReport:
    """Pointwise network vs the same network with 3x3x3 convolutions, layer by layer."""
    N, D, H, W = (int(v) for v in tuple(input_dims)[:4])
    pw = build_network(as_pointwise(spec), (D, H, W), tables=False)
    c3 = build_network(as_conv3(spec), (D, H, W), tables=False)
    pw_rows, _ = count_flops(pw, input_dims)
    c3_rows, _ = count_flops(c3, input_dims)
    header = [
        "layer", "kind", "params_pointwise", "params_conv3", "param_ratio",
        "weight_ratio", "flops_pointwise", "flops_conv3", "flop_ratio", "moved_bytes",
    ]
    rows = []
    for a, b, info in zip(pw_rows, c3_rows, pw.info):
        wr = ""
        if a.kind == "pointwise" and b.kind == "conv3":
            wr = _ratio(b.params - info.c_out, a.params - info.c_out)
        rows.append([a.name, a.kind if a.kind == b.kind else f"{a.kind}/{b.kind}", a.params, b.params,
                     _ratio(b.params, a.params), wr, a.flops, b.flops, _ratio(b.flops, a.flops), a.moved_bytes])
    tp, tc = sum(r.params for r in pw_rows), sum(r.params for r in c3_rows)
    fp, fc = sum(r.flops for r in pw_rows), sum(r.flops for r in c3_rows)
    rows.append(["TOTAL", "", tp, tc, _ratio(tc, tp), "", fp, fc, _ratio(fc, fp), sum(r.moved_bytes for r in pw_rows)])
    totals = {"params_pointwise": tp, "params_conv3": tc, "flops_pointwise": fp, "flops_conv3": fc}
    return CompareReport(header, rows, totals)
