import pytest
import torch

from avdialog.data import SynthSpec, build_vocabulary, generate_synthetic_corpus
from avdialog.decoder import DecoderConfig
from avdialog.encoder import EncoderConfig
from avdialog.model import AVSDModel


@pytest.fixture(autouse=True)
def _seed_torch():
    torch.manual_seed(0)


@pytest.fixture(scope="session")
def tiny_corpus():
    spec = SynthSpec(num_videos=4, turns_per_dialog=2, T_a=8, T_v=4,
                     D_a=6, D_v=6, vocab_size=3)
    return generate_synthetic_corpus(spec, 0)


@pytest.fixture(scope="session")
def tiny_vocab(tiny_corpus):
    return build_vocabulary(tiny_corpus)


def tiny_encoder_config(**kw):
    base = dict(N=2, D_a=6, D_v=6, d_a=8, d_v=8, ff_a=12, ff_v=12,
                heads=2, d_c=8, ff_c=12)
    base.update(kw)
    return EncoderConfig(**base)


def tiny_decoder_config(**kw):
    base = dict(M=2, d=8, ff=12, heads=2, embed_dim=8)
    base.update(kw)
    return DecoderConfig(**base)


@pytest.fixture()
def tiny_model(tiny_vocab):
    return AVSDModel(tiny_vocab, tiny_encoder_config(), tiny_decoder_config(), seed=1)
