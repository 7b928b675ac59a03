"""Configuraciones diminutas para las pruebas rapidas (M=4, d=16)."""
import torch

from sparrow.bench.workloads import TaskConfig
from sparrow.draft import DraftConfig, DraftModel
from sparrow.model import ModelConfig, TargetModel, TokenSequence
from sparrow.numkernel import Rng


def tiny_config(dtype='float64', **overrides):
    values = dict(num_layers=4, hidden_dim=16, num_heads=2, vocab_size=64, max_positions=256,
                  visual_alphabet=4, ffn_mult=2, dtype=dtype)
    values.update(overrides)
    return ModelConfig(**values)


def tiny_task(cfg, **overrides):
    values = dict(num_slots=4, tagged=2, query_slots=1, chant_len=4, noise=True, jitter=0.05, codebook_seed=7)
    values.update(overrides)
    return TaskConfig.for_model(cfg, **values)


def sharpen(model, factor=30.0):
    """Escala la cabeza LM para que las distribuciones no sean casi uniformes."""
    with torch.no_grad():
        model.head.weight.mul_(factor)
    return model


def tiny_target(seed=0, dtype='float64', sharp=True, **overrides):
    target = TargetModel(tiny_config(dtype, **overrides), generator=Rng(seed, 1).torch_generator())
    target.eval()
    return sharpen(target) if sharp else target


def tiny_draft(target, seed=0, **overrides):
    draft = DraftModel(DraftConfig.for_target(target.cfg, **overrides), target,
                       generator=Rng(seed, 2).torch_generator())
    draft.eval()
    return draft


def random_sequence(cfg, l_vis, l_txt, seed=0):
    rng = Rng(seed, 9)
    visual = torch.as_tensor(rng.normal((l_vis, cfg.hidden_dim)), dtype=torch.float32)
    symbols = tuple(int(s) for s in rng.integers(0, cfg.visual_alphabet, l_vis))
    text = tuple(int(t) for t in rng.integers(0, cfg.vocab_size, l_txt))
    return TokenSequence(visual, symbols, text)
