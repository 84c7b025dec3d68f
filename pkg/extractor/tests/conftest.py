import numpy as np
import pytest
import torch
from PIL import Image
from tokenizers import pre_tokenizers
from transformers import CLIPConfig, CLIPImageProcessor, CLIPModel, CLIPTokenizer


@pytest.fixture(scope="session")
def tiny_model_dir(tmp_path_factory):
    """Randomly initialized CLIP with the reference 224/16 patch grid."""
    d = tmp_path_factory.mktemp("tiny_clip")
    toks = ["<|startoftext|>", "<|endoftext|>"]
    for ch in sorted(pre_tokenizers.ByteLevel.alphabet()):
        toks += [ch, ch + "</w>"]
    vocab = {t: i for i, t in enumerate(toks)}
    tokenizer = CLIPTokenizer(vocab=vocab, merges=[])
    cfg = CLIPConfig(
        text_config=dict(hidden_size=32, intermediate_size=64,
                         num_hidden_layers=2, num_attention_heads=2,
                         vocab_size=len(vocab), max_position_embeddings=77,
                         projection_dim=16, bos_token_id=0, eos_token_id=1,
                         pad_token_id=1),
        vision_config=dict(hidden_size=32, intermediate_size=64,
                           num_hidden_layers=2, num_attention_heads=2,
                           image_size=224, patch_size=16, projection_dim=16),
        projection_dim=16,
    )
    torch.manual_seed(7)
    CLIPModel(cfg).eval().save_pretrained(d)
    tokenizer.save_pretrained(d)
    CLIPImageProcessor().save_pretrained(d)
    return str(d)


def _write_images(root, spec, seed0):
    """spec: {subdir: count}; writes small deterministic noise PNGs."""
    k = seed0
    for sub, count in spec.items():
        d = root / sub if sub else root
        d.mkdir(parents=True, exist_ok=True)
        for i in range(count):
            arr = np.random.default_rng(k).integers(0, 255, (48, 48, 3),
                                                    dtype=np.uint8)
            Image.fromarray(arr).save(d / f"img_{i}.png")
            k += 1
    return root


@pytest.fixture(scope="session")
def id_image_dir(tmp_path_factory):
    """Ten images across the two known classes."""
    return _write_images(tmp_path_factory.mktemp("id_images"),
                         {"cat": 5, "dog": 5}, seed0=100)


@pytest.fixture(scope="session")
def ood_image_dir(tmp_path_factory):
    """Images in a directory that matches no class name."""
    return _write_images(tmp_path_factory.mktemp("ood_images"),
                         {"lizard": 4}, seed0=900)


@pytest.fixture(scope="session")
def class_file(tmp_path_factory):
    p = tmp_path_factory.mktemp("classes") / "classes.txt"
    p.write_text("# known classes\ncat\ndog\n")
    return p
