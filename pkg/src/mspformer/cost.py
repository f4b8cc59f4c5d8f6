# cost.py

import pandas as pd

COLUMNS = ["layer", "kind", "params", "macs"]


def _size(*tensors):
    return int(sum(t.size for t in tensors if t is not None))


def _conv_row(name, p, h_in, w_in, kind="conv"):
    """Row for a conv on an h_in x w_in input; returns (row, h_out, w_out)."""
    h_out, w_out = p.output_extent(h_in), p.output_extent(w_in)
    c_out, c_in_g, k, _ = p.weight.shape
    macs = c_out * c_in_g * k * k * h_out * w_out
    return {"layer": name, "kind": kind, "params": _size(p.weight, p.bias), "macs": macs}, h_out, w_out


def _linear_row(name, p, tokens):
    c_in, c_out = p.weight.shape
    return {"layer": name, "kind": "linear", "params": _size(p.weight, p.bias), "macs": tokens * c_in * c_out}


def _attention_rows(name, attn, cfg, h, w):
    tokens = h * w
    rows = [_linear_row(f"{name}.q", attn.query, tokens)]
    for i, ((_, stride), branch) in enumerate(zip(cfg.branches, attn.branches), start=1):
        prefix = f"{name}.b{i}"
        hb, wb = h // stride, w // stride
        if branch.reduce is not None:
            rows.append(_conv_row(f"{prefix}.sr", branch.reduce, h, w)[0])
        pooled = hb * wb
        rows.append(_linear_row(f"{prefix}.k", branch.key, pooled))
        rows.append(_conv_row(f"{prefix}.dw_v", branch.dw_value, hb, wb)[0])
        rows.append(_linear_row(f"{prefix}.v", branch.value, pooled))
        width = branch.key.weight.shape[1]
        # q k^T and attn v each cost tokens * pooled * width
        rows.append({"layer": f"{prefix}.sdpa", "kind": "attention", "params": 0,
                     "macs": 2 * tokens * pooled * width})
    rows.append(_linear_row(f"{name}.o", attn.out, tokens))
    return rows


def _stage_rows(name, stage, h, w):
    rows = []
    tokens = h * w
    for i, block in enumerate(stage.msp_blocks):
        prefix = f"{name}.msp{i}"
        rows.append({"layer": f"{prefix}.norm1", "kind": "norm", "params": _size(block.norm1.gamma, block.norm1.beta),
                     "macs": 0})
        rows.extend(_attention_rows(f"{prefix}.attn", block.attn, block.cfg, h, w))
        rows.append({"layer": f"{prefix}.norm2", "kind": "norm", "params": _size(block.norm2.gamma, block.norm2.beta),
                     "macs": 0})
        rows.append(_linear_row(f"{prefix}.ffn.fc1", block.ffn.fc1, tokens))
        rows.append(_conv_row(f"{prefix}.ffn.dw", block.ffn.dw, h, w)[0])
        rows.append(_linear_row(f"{prefix}.ffn.fc2", block.ffn.fc2, tokens))
    for i, block in enumerate(stage.lcb_blocks):
        prefix = f"{name}.lcb{i}"
        rows.append(_conv_row(f"{prefix}.dw", block.dw, h, w)[0])
        rows.append(_conv_row(f"{prefix}.pw", block.pw, h, w)[0])
        if block.se is not None:
            rows.append(_conv_row(f"{prefix}.ca.reduce", block.se.reduce, 1, 1, kind="gate")[0])
            rows.append(_conv_row(f"{prefix}.ca.expand", block.se.expand, 1, 1, kind="gate")[0])
    return rows


def cost_table(model, height, width):
    """Per-layer parameters and MACs for one image of ``height`` x ``width``."""
    rows = []
    row, h, w = _conv_row("stem", model.stem, height, width)
    rows.append(row)
    skips = []
    for i, stage in enumerate(model.encoder):
        rows.extend(_stage_rows(f"enc{i}", stage, h, w))
        if i < len(model.downs):
            skips.append((h, w))
            row, h, w = _conv_row(f"down{i}", model.downs[i], h, w)
            rows.append(row)
    level_ids = range(len(model.decoder) - 1, -1, -1)
    for i, level, (h, w) in zip(level_ids, model.decoder, reversed(skips)):
        rows.append(_conv_row(f"dec{i}.up", level.up, h, w)[0])
        rows.append(_conv_row(f"dec{i}.fuse", level.fuse, h, w)[0])
        rows.extend(_stage_rows(f"dec{i}", level.stage, h, w))
    rows.append(_conv_row("bridge", model.bridge, height, width)[0])
    rows.extend(_stage_rows("refine", model.refine, height, width))
    rows.append(_conv_row("head", model.head, height, width)[0])
    table = pd.DataFrame(rows, columns=COLUMNS)
    return table.astype({"params": "int64", "macs": "int64"})


def count_macs(model, height, width, batch=1):
    return int(cost_table(model, height, width)["macs"].sum()) * batch


def summarize(model, height, width):
    """Totals by layer kind plus an overall row."""
    table = cost_table(model, height, width)
    summary = table.groupby("kind", sort=True)[["params", "macs"]].sum()
    summary.loc["total"] = summary.sum()
    return summary
