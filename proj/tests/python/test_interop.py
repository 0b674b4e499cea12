"""Cross-checks of the native library against numpy, Pillow, safetensors and transformers."""

import json
import os
import subprocess

import numpy as np
import torch
from PIL import Image
from safetensors import safe_open
from safetensors.numpy import load_file, save_file
from safetensors.torch import save_file as torch_save_file

PROBE = os.environ["QKSCOPE_PROBE"]
SOURCE = os.environ["QKSCOPE_SOURCE_DIR"]
FIXTURES = os.environ["QKSCOPE_FIXTURE_DIR"]


def probe(*args):
    out = subprocess.run([PROBE, *map(str, args)], check=True, capture_output=True, text=True)
    return json.loads(out.stdout) if out.stdout.strip() else None


def test_numpy_written_container_is_read(tmp_path):
    rng = np.random.default_rng(0)
    tensors = {
        "w.f32": rng.standard_normal((3, 4)).astype(np.float32),
        "w.f16": rng.standard_normal((5,)).astype(np.float16),
        "w.f64": rng.standard_normal((2, 2, 2)),
        "w.i64": np.arange(6, dtype=np.int64).reshape(2, 3),
    }
    path = tmp_path / "n.safetensors"
    save_file(tensors, str(path), metadata={"source": "numpy"})
    got = probe("tensors", path)
    assert got["metadata"] == {"source": "numpy"}
    for name, arr in tensors.items():
        entry = got["tensors"][name]
        assert entry["shape"] == list(arr.shape)
        if arr.dtype.kind == "f":
            np.testing.assert_array_equal(np.array(entry["values"], np.float32), arr.astype(np.float32).ravel())
    assert got["tensors"]["w.i64"]["dtype"] == "I64"


def test_bfloat16_container_is_read(tmp_path):
    t = torch.tensor([1.0, -0.15625, 3.0e5, 1.0e-3], dtype=torch.bfloat16)
    path = tmp_path / "b.safetensors"
    torch_save_file({"x": t}, str(path))
    got = probe("tensors", path)["tensors"]["x"]
    assert got["dtype"] == "BF16"
    np.testing.assert_array_equal(np.array(got["values"], np.float32), t.float().numpy())


def test_native_container_is_read_by_safetensors(tmp_path):
    path = tmp_path / "c.safetensors"
    probe("write", path)
    loaded = load_file(str(path))
    np.testing.assert_array_equal(loaded["a.f32"], np.array([[1.0, -2.5, 3.25], [0.0, 1e-3, 7.0]], np.float32))
    np.testing.assert_array_equal(loaded["b.f16"], np.array([0.5, -1.0, 65504.0], np.float16))
    with safe_open(str(path), "np") as f:
        assert f.metadata() == {"note": "probe"}


def test_embedding_dump_layout(tmp_path):
    ckpt = os.path.join(FIXTURES, "toy.safetensors")
    mapping = os.path.join(FIXTURES, "toy.mapping.json")
    img = os.path.join(FIXTURES, "o3", "s1", "image.png")
    path = tmp_path / "d.safetensors"
    probe("dump", ckpt, mapping, img, path)
    loaded = load_file(str(path))
    with safe_open(str(path), "np") as f:
        meta = json.loads(f.metadata()["meta"])
    assert meta["grid"] == [4, 4]
    assert meta["prefix_tokens"] == 1
    assert meta["num_layers"] == 2
    assert meta["image_id"] == "probe"
    assert sorted(loaded) == ["layer0.ln_input", "layer1.ln_input"]
    fwd = probe("forward", ckpt, mapping, img)
    for layer in range(2):
        arr = loaded[f"layer{layer}.ln_input"]
        assert arr.shape == (17, 8) and arr.dtype == np.float32
        np.testing.assert_array_equal(arr.ravel(), np.array(fwd["ln_inputs"][layer], np.float32))


def test_png_decode_matches_pillow(tmp_path):
    rng = np.random.default_rng(1)
    arr = rng.integers(0, 256, (9, 13, 3), dtype=np.uint8)
    path = tmp_path / "p.png"
    Image.fromarray(arr).save(path)
    got = probe("image", path)
    assert (got["width"], got["height"]) == (13, 9)
    np.testing.assert_array_equal(np.array(got["pixels"], np.uint8).reshape(9, 13, 3), arr)
    Image.fromarray(arr).convert("RGBA").save(tmp_path / "a.png")
    np.testing.assert_array_equal(np.array(probe("image", tmp_path / "a.png")["pixels"], np.uint8).reshape(9, 13, 3), arr)


def test_jpeg_decode_matches_pillow(tmp_path):
    yy, xx = np.mgrid[0:40, 0:48]
    arr = np.stack([xx * 5, yy * 6, (xx + yy) * 3], axis=-1).clip(0, 255).astype(np.uint8)
    path = tmp_path / "j.jpg"
    Image.fromarray(arr).save(path, quality=92)
    got = np.array(probe("image", path)["pixels"], np.int32).reshape(40, 48, 3)
    ref = np.array(Image.open(path).convert("RGB"), np.int32)
    assert np.abs(got - ref).max() <= 2


def load_mapping(name, **overrides):
    with open(os.path.join(SOURCE, "mappings", name)) as f:
        m = json.load(f)
    m.update(overrides)
    return m


def random_image(tmp_path, size, seed):
    rng = np.random.default_rng(seed)
    arr = rng.integers(0, 256, (size, size, 3), dtype=np.uint8)
    path = tmp_path / "img.png"
    Image.fromarray(arr).save(path)
    return path, arr


def perturb(model, seed):
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for name, p in model.named_parameters():
            if p.ndim == 1 and ("norm" in name or "layrnorm" in name):
                p.copy_(1.0 + 0.2 * torch.randn(p.shape, generator=gen))
            else:
                p.copy_(0.3 * torch.randn(p.shape, generator=gen))


def encoder_layers(backbone):
    """Transformer blocks of a backbone across transformers releases."""
    if hasattr(backbone, "layers"):
        return backbone.layers
    encoder = backbone.encoder
    return encoder.layers if hasattr(encoder, "layers") else encoder.layer


def pixel_values(arr, mapping):
    x = arr.astype(np.float32) / 255.0
    x = (x - np.array(mapping["image_mean"], np.float32)) / np.array(mapping["image_std"], np.float32)
    return torch.from_numpy(x.transpose(2, 0, 1)[None].copy())


def compare(tmp_path, model, mapping, arr, img_path, ln_inputs, attentions):
    model.save_pretrained(tmp_path / "ckpt")
    mapping_path = tmp_path / "mapping.json"
    mapping_path.write_text(json.dumps(mapping))
    got = probe("forward", tmp_path / "ckpt" / "model.safetensors", mapping_path, img_path)
    tokens = got["tokens"]
    d = mapping["embed_dim"]
    for layer in range(mapping["num_layers"]):
        native = np.array(got["ln_inputs"][layer]).reshape(tokens, d)
        assert np.abs(native - ln_inputs[layer]).max() < 1e-3
        for head in range(mapping["num_heads"]):
            s = np.array(got["scores"][layer][head], np.float64).reshape(tokens, tokens)
            p = np.exp(s - s.max(axis=1, keepdims=True))
            p /= p.sum(axis=1, keepdims=True)
            assert np.abs(p - attentions[layer][0, head]).max() < 1e-4


TINY = dict(num_layers=2, num_heads=4, head_dim=8, embed_dim=32, value_dim=8, patch_size=8, image_size=32)


def test_forward_matches_transformers_vit(tmp_path):
    from transformers import ViTConfig, ViTForImageClassification

    cfg = ViTConfig(hidden_size=32, num_hidden_layers=2, num_attention_heads=4, intermediate_size=48,
                    image_size=32, patch_size=8, layer_norm_eps=1e-12, num_labels=3)
    cfg._attn_implementation = "eager"
    model = ViTForImageClassification(cfg).eval()
    perturb(model, 2)
    mapping = load_mapping("hf_vit_base_patch16_224.json", **TINY)
    img_path, arr = random_image(tmp_path, 32, 3)
    with torch.no_grad():
        out = model(pixel_values(arr, mapping), output_hidden_states=True, output_attentions=True)
        ln = [encoder_layers(model.vit)[l].layernorm_before(out.hidden_states[l])[0].numpy() for l in range(2)]
    compare(tmp_path, model, mapping, arr, img_path, ln, [a.numpy() for a in out.attentions])


def test_forward_matches_transformers_deit_distilled(tmp_path):
    from transformers import DeiTConfig, DeiTForImageClassificationWithTeacher

    cfg = DeiTConfig(hidden_size=32, num_hidden_layers=2, num_attention_heads=4, intermediate_size=48,
                     image_size=32, patch_size=8, layer_norm_eps=1e-12, num_labels=3)
    cfg._attn_implementation = "eager"
    model = DeiTForImageClassificationWithTeacher(cfg).eval()
    perturb(model, 4)
    mapping = load_mapping("hf_deit_base_distilled_patch16_224.json", **TINY)
    img_path, arr = random_image(tmp_path, 32, 5)
    with torch.no_grad():
        out = model(pixel_values(arr, mapping), output_hidden_states=True, output_attentions=True)
        ln = [encoder_layers(model.deit)[l].layernorm_before(out.hidden_states[l])[0].numpy() for l in range(2)]
    compare(tmp_path, model, mapping, arr, img_path, ln, [a.numpy() for a in out.attentions])


def test_forward_matches_transformers_clip(tmp_path):
    from transformers import CLIPConfig, CLIPModel

    vision = dict(hidden_size=32, num_hidden_layers=2, num_attention_heads=4, intermediate_size=48,
                  image_size=32, patch_size=8, hidden_act="quick_gelu", layer_norm_eps=1e-5)
    text = dict(hidden_size=16, num_hidden_layers=1, num_attention_heads=2, intermediate_size=16,
                vocab_size=64, bos_token_id=0, eos_token_id=1, pad_token_id=1)
    cfg = CLIPConfig(vision_config=vision, text_config=text, projection_dim=8)
    cfg._attn_implementation = "eager"
    cfg.vision_config._attn_implementation = "eager"
    model = CLIPModel(cfg).eval()
    perturb(model, 6)
    mapping = load_mapping("hf_clip_vit_base_patch16.json", **TINY)
    img_path, arr = random_image(tmp_path, 32, 7)
    with torch.no_grad():
        out = model.vision_model(pixel_values(arr, mapping), output_hidden_states=True, output_attentions=True)
        layers = encoder_layers(model.vision_model)
        ln = [layers[l].layer_norm1(out.hidden_states[l])[0].numpy() for l in range(2)]
    compare(tmp_path, model, mapping, arr, img_path, ln, [a.numpy() for a in out.attentions])
