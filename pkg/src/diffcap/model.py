"""Assembles embedding table, denoiser and language model into one module."""
from __future__ import annotations

from torch import nn

from .config import TrainConfig
from .denoiser import Denoiser
from .layers import init_parameters
from .lm import ARCaptioner, NARLanguageModel
from .numkernel import RngState
from .textcodec import EmbeddingTable


class DiffCapModel(nn.Module):
    def __init__(self, cfg: TrainConfig, vocab_size: int, d_f: int):
        super().__init__()
        self.n_v = cfg.n_v
        self.d_v = cfg.d_v
        self.embedding = EmbeddingTable(vocab_size, cfg.d_v)
        self.denoiser = Denoiser(cfg.n_v, cfg.d_v, d_f, cfg.T, cfg.n_denoiser_blocks,
                                 cfg.heads, cfg.ffn_mult, cfg.drop_path)
        self.lm = NARLanguageModel(cfg.n_v, cfg.d_v, vocab_size, cfg.n_lm_blocks, cfg.heads,
                                   cfg.ffn_mult, cfg.drop_path, cfg.residual_first_layer)


def build_model(cfg: TrainConfig, vocab_size: int, d_f: int, seed: int | None = None) -> nn.Module:
    """Construct and deterministically initialize the model named by ``cfg.arch``."""
    cfg.validate()
    if cfg.arch == "ar":
        model = ARCaptioner(cfg.n_v, cfg.d_v, d_f, vocab_size, cfg.n_lm_blocks, cfg.heads,
                            cfg.ffn_mult, cfg.drop_path)
    else:
        model = DiffCapModel(cfg, vocab_size, d_f)
    rng = RngState(cfg.seed if seed is None else seed, stream=1)
    init_parameters(model, rng, embed_std=cfg.embed_std, pos_std=cfg.pos_std)
    return model
