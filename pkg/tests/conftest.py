import pytest
import torch

from emotts.config import Config, CorpusConfig, ModelConfig
from emotts.corpus import generate_corpus

# Small tensors lose badly to thread scheduling overhead.
torch.set_num_threads(1)


def tiny_corpus_config(**overrides) -> CorpusConfig:
    base = dict(
        seed=7, speakers=2, emotional_speakers=1, emotions=2,
        utterances_per_cell=5, vocab_size=20, bands=20,
        min_tokens=4, max_tokens=8,
    )
    base.update(overrides)
    return CorpusConfig(**base)


def small_model_config(**overrides) -> ModelConfig:
    base = dict(
        vocab_size=20, bands=20, width=32, attn_blocks=1, attn_heads=2,
        emb_width=16, spk_width=16, adv_hidden=16, duration_hidden=16,
        adaptor_blocks=1, ref_channels=(8, 8), ref_gru=16, unet_base=16,
    )
    base.update(overrides)
    return ModelConfig(**base)


def small_config(**train_overrides) -> Config:
    cfg = Config()
    cfg.corpus = tiny_corpus_config()
    cfg.model = small_model_config()
    for key, value in train_overrides.items():
        setattr(cfg.train, key, value)
    return cfg


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    """20-utterance corpus: 2 speakers (1 emotional), 2 emotions."""
    out = tmp_path_factory.mktemp("tiny_corpus")
    corpus, sig = generate_corpus(tiny_corpus_config(), out)
    return corpus, sig


@pytest.fixture(scope="session")
def medium_corpus(tmp_path_factory):
    """Enough utterances per cell for probe/stratification tests."""
    out = tmp_path_factory.mktemp("medium_corpus")
    cfg = tiny_corpus_config(utterances_per_cell=15, test_fraction=0.4)
    corpus, sig = generate_corpus(cfg, out)
    return corpus, sig
