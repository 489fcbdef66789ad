"""Random small instances for checking every loss gradient against finite differences."""

from __future__ import annotations

import numpy as np
import torch

from .attention import SuperpixelAttention, select_top, superpixel_pool
from .core import LossConfig, Rng
from .losses import (
    LinearHead,
    contrastive_loss,
    finite_diff_errors,
    global_loss,
    local_loss,
    total_loss,
    unit_normalize,
)
from .slic import enforce_connectivity

T64 = torch.float64
LOSSES = ("global", "local", "contrast", "total")
TOLERANCE = 1e-4
# map side; every pixel adds d coordinates to the finite-difference sweep
SIDE = 5


def _voronoi(gen: np.random.Generator, h: int, w: int, n: int) -> np.ndarray:
    sites = np.stack([gen.uniform(0, h, n), gen.uniform(0, w, n)], axis=1)
    ys, xs = np.mgrid[0:h, 0:w]
    d = (ys[..., None] - sites[:, 0]) ** 2 + (xs[..., None] - sites[:, 1]) ** 2
    return d.argmin(axis=2)


def _instance(gen: np.random.Generator):
    # a 2-wide layer norm maps every row to +-1, leaving only roundoff to compare
    d = int(gen.integers(3, 9))
    k = int(gen.integers(2, 5))
    b = 2
    maps, from_x2 = [], []
    for _ in range(b):
        while True:
            smap = enforce_connectivity(_voronoi(gen, SIDE, SIDE, int(gen.integers(2, 9))), 0.0)
            if 2 <= smap.L <= 8:
                break
        maps.append(smap)
        prov = gen.random(smap.L) < 0.5
        prov[0], prov[-1] = False, True
        from_x2.append(torch.as_tensor(prov))
    classes = gen.permutation(k)
    y1 = torch.eye(k, dtype=T64)[[classes[0], classes[1 % k]]]
    y2 = torch.eye(k, dtype=T64)[[classes[1 % k], classes[0]]]
    seed = int(gen.integers(0, 2**31))
    torch_gen = torch.Generator().manual_seed(seed)
    att = SuperpixelAttention(d, generator=torch_gen, dtype=T64)
    local = LinearHead(d, k, "local", dtype=T64)
    glob = LinearHead(d, k, "global", dtype=T64)
    with torch.no_grad():
        # off the symmetric start, so weights and rankings are distinct
        att.gain.copy_(torch.from_numpy(gen.uniform(0.5, 1.5, d)))
        att.bias.copy_(torch.from_numpy(gen.normal(0, 0.3, d)))
        for head in (local, glob):
            head.weight.copy_(torch.from_numpy(gen.normal(0, 0.5, (k, d))))
            head.bias.copy_(torch.from_numpy(gen.normal(0, 0.1, k)))
    zhat = [torch.from_numpy(gen.normal(size=(SIDE, SIDE, d))) for _ in range(b)]
    z = torch.from_numpy(gen.normal(size=(b, d)))
    return dict(maps=maps, from_x2=from_x2, y1=y1, y2=y2, att=att, local=local, glob=glob, zhat=zhat, z=z)


def _forward(inst, zhat, z, wq, wk, wv, gain, bias, lw, lb, gw, gb, frozen, cfg: LossConfig):
    """All losses of one instance; ``frozen`` pins the ranking and the mixing ratio."""
    att = inst["att"]
    c_all, w_all = [], []
    for zi, smap in zip(zhat, inst["maps"]):
        f = superpixel_pool(zi, smap)
        q, k_, v = f @ wq, f @ wk, f @ wv
        a = torch.softmax(q @ k_.T / att.dim ** 0.5, dim=1)
        x = f + a @ v
        mean = x.mean(1, keepdim=True)
        var = ((x - mean) ** 2).mean(1, keepdim=True)
        c = (x - mean) / torch.sqrt(var + att.eps) * gain + bias
        c_all.append(c)
        w_all.append(torch.sigmoid(c.sum(1)))
    if frozen is None:
        sel = [select_top(w, 0.7) for w in w_all]
        lam = []
        for w, smap, prov in zip(w_all, inst["maps"], inst["from_x2"]):
            mass = w.detach() * torch.as_tensor(smap.sizes(), dtype=T64)
            lam.append(mass[prov].sum() / mass.sum())
        frozen = (sel, torch.stack(lam))
    sel, lam = frozen
    logits = z @ gw.T + gb
    g = global_loss(logits, inst["y1"], inst["y2"], lam)
    chosen = [c[s] for c, s in zip(c_all, sel)]
    prov = [p[s] for p, s in zip(inst["from_x2"], sel)]
    head = LinearHead.__new__(LinearHead)
    torch.nn.Module.__init__(head)
    head.role, head.weight, head.bias = "local", lw, lb
    loc = local_loss(chosen, prov, inst["y1"], inst["y2"], head)
    labels = torch.cat([torch.where(p, inst["y2"][j].argmax(), inst["y1"][j].argmax()) for j, p in enumerate(prov)])
    con = contrastive_loss(unit_normalize(torch.cat(chosen)), labels, cfg.tau, literal=cfg.literal_contrast)
    return {"global": g, "local": loc, "contrast": con, "total": total_loss(g, loc, con, cfg)}, frozen


def check_instance(inst, eps: float = 1e-4, cfg: LossConfig | None = None) -> dict:
    cfg = cfg or LossConfig()
    att, local, glob = inst["att"], inst["local"], inst["glob"]
    params = [*inst["zhat"], inst["z"], att.wq, att.wk, att.wv, att.gain, att.bias,
              local.weight, local.bias, glob.weight, glob.bias]
    params = [p.detach().clone() for p in params]
    n_maps = len(inst["zhat"])
    _, frozen = _forward(inst, params[:n_maps], *params[n_maps:], None, cfg)

    def fn(*values):
        return _forward(inst, values[:n_maps], *values[n_maps:], frozen, cfg)[0]

    return finite_diff_errors(fn, params, eps)


def run_trials(seed: int = 7, trials: int = 20, eps: float = 1e-4, cfg: LossConfig | None = None) -> dict:
    """Largest relative gradient error per loss over ``trials`` random instances."""
    gen = Rng(seed).generator
    worst = dict.fromkeys(LOSSES, 0.0)
    for _ in range(trials):
        errs = check_instance(_instance(gen), eps, cfg)
        for name, err in errs.items():
            worst[name] = max(worst[name], err)
    return worst
