"""Derisk: overfit 8 clip-AD pairs through the frozen toy LM."""
import time

import numpy as np
import torch

from adnarrator.data import CharacterEntry
from adnarrator.lm import LMProfile, ToyCausalLM, greedy_decode, tokenize
from adnarrator.mapper import MapperConfig, VisualMappers
from adnarrator.prompt import build_prompt
from adnarrator.training import autoregressive_loss

torch.manual_seed(0)
rng = np.random.default_rng(7)

D_IN = 16
lm = ToyCausalLM(LMProfile(), seed=0)
mappers = VisualMappers(MapperConfig.toy_profile(input_dim=D_IN))

texts = [
    "Lisa walks away.",
    "Matty smiles at Annie.",
    "The door opens.",
    "Annie turns around.",
    "Rain falls outside.",
    "Lisa stares at Matty.",
    "A car pulls up.",
    "Matty looks up.",
]
features = [rng.normal(size=(6, D_IN)).astype(np.float32) for _ in texts]
targets = [tokenize(t) + [lm.profile.eos_id] for t in texts]

params = [p for p in mappers.parameters() if p.requires_grad]
print("trainable tensors:", len(params), "scalars:", sum(p.numel() for p in params))
opt = torch.optim.AdamW(params, lr=1e-2, betas=(0.9, 0.999), weight_decay=0.01)

start = time.monotonic()
for step in range(2000):
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
    opt.step()
    if step % 100 == 0 or float(loss) < 0.05:
        print(f"step {step:4d} per-token NLL {float(loss):.4f} ({time.monotonic()-start:.1f}s)")
    if float(loss) < 0.02:
        break

# greedy check
ok = 0
with torch.no_grad():
    for f, text in zip(features, texts):
        video = mappers.map_visual(f)
        p = build_prompt([], video, [])
        res = greedy_decode(lm, p, max_len=64)
        match = res.text == text
        ok += match
        print(f"{match} {res.text!r} vs {text!r}")
print(f"{ok}/8 exact, {time.monotonic()-start:.1f}s total")
