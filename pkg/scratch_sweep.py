"""LR sweep + gradient-flow probe for the frozen-LM overfit."""
import time

import numpy as np
import torch

from adnarrator.lm import LMProfile, ToyCausalLM, tokenize
from adnarrator.mapper import MapperConfig, VisualMappers
from adnarrator.prompt import build_prompt
from adnarrator.training import autoregressive_loss

rng = np.random.default_rng(7)
D_IN = 16
texts = [
    "Lisa walks away.", "Matty smiles at Annie.", "The door opens.",
    "Annie turns around.", "Rain falls outside.", "Lisa stares at Matty.",
    "A car pulls up.", "Matty looks up.",
]
features = [rng.normal(size=(6, D_IN)).astype(np.float32) for _ in texts]


def run(lr, steps=400, wd=0.01, seed=0, lm_seed=0):
    torch.manual_seed(seed)
    lm = ToyCausalLM(LMProfile(), seed=lm_seed)
    mappers = VisualMappers(MapperConfig.toy_profile(input_dim=D_IN))
    targets = [tokenize(t) + [lm.profile.eos_id] for t in texts]
    params = [p for p in mappers.parameters() if p.requires_grad]
    opt = torch.optim.AdamW(params, lr=lr, betas=(0.9, 0.999), weight_decay=wd)
    t0 = time.monotonic()
    first = last = None
    for step in range(steps):
        opt.zero_grad()
        total = torch.zeros(())
        ntok = 0
        for f, tgt in zip(features, targets):
            video = mappers.map_visual(f)
            p = build_prompt([], video, [])
            total = total + autoregressive_loss(lm, p, tgt)
            ntok += len(tgt)
        loss = total / ntok
        loss.backward()
        if step == 0:
            gn = sum(float(p.grad.norm()) ** 2 for p in params if p.grad is not None) ** 0.5
            print(f"  lr={lr} grad-norm@0 {gn:.4f}")
            first = float(loss.detach())
        opt.step()
        last = float(loss.detach())
    print(f"  lr={lr} wd={wd}: NLL {first:.3f} -> {last:.3f} in {steps} steps ({time.monotonic()-t0:.0f}s)")
    return last


for lr in (3e-2, 1e-1, 3e-1):
    run(lr)
