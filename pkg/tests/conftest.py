import numpy as np
import pytest

from mmtune.cognitive import DecoderConfig, init_params
from mmtune.dataset import InstructionExample
from mmtune.encoders import ModalityConfig
from mmtune.tokenizer import Vocab


@pytest.fixture
def tiny_dec_cfg():
    return DecoderConfig(d_e=16, layers=1, heads=2, d_ff=32, vocab_size=260,
                         max_seq_len=96)


@pytest.fixture
def tiny_mod_cfg():
    return ModalityConfig(l_prime=2, image_len=6, image_dim=5, video_frames=4,
                          video_dim=5, audio_len=6, audio_dim=5)


@pytest.fixture
def vocab():
    return Vocab()


@pytest.fixture
def tiny_params(tiny_dec_cfg, tiny_mod_cfg):
    return init_params(tiny_dec_cfg, tiny_mod_cfg, np.random.default_rng(42))


def make_examples(n, kinds=("image", "video", "audio"), source="synthetic"):
    words = ["red ball", "blue cube", "green tree", "tall tower", "small dog",
             "old boat", "new car", "wide river", "dark cave", "warm sun",
             "cold moon", "fast hawk", "slow snail", "soft cloud", "hard rock",
             "thin wire", "grey wolf", "pale star", "deep lake", "loud bell"]
    out = []
    for i in range(n):
        media = ({"kind": kinds[i % len(kinds)], "path": f"media-{i}"},)
        out.append(InstructionExample(id=f"ex{i}", media=media,
                                      instruction=f"name object {i}",
                                      response=words[i % len(words)],
                                      source=source))
    return out


@pytest.fixture
def examples16():
    return make_examples(16)
