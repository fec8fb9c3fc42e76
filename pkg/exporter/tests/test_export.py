import json
import struct
import subprocess

import numpy as np
import pytest
from PIL import Image

from vlmexport.cat1 import HEADER_SIZE
from vlmexport.cli import dispatch
from vlmexport.export import ExportRequest, export_attention, load_checkpoint
from vlmexport.tinyzoo import build_tiny_checkpoint

SAMPLES = [
    ("detect the apple", "two_apples.png"),
    ("detect the red mug", "mug.png"),
    ("clarify the bottle on the left", "bottles.png"),
]


@pytest.fixture(scope="session")
def checkpoint(tmp_path_factory):
    return build_tiny_checkpoint(tmp_path_factory.mktemp("ckpt") / "tiny", grid_side=8, seed=0)


@pytest.fixture(scope="session")
def loaded(checkpoint):
    return load_checkpoint(checkpoint)


@pytest.fixture(scope="session")
def images(tmp_path_factory):
    root = tmp_path_factory.mktemp("images")
    rng = np.random.default_rng(0)
    paths = {}
    for _, name in SAMPLES:
        pixels = rng.integers(0, 256, size=(64, 64, 3), dtype=np.uint8)
        path = root / name
        Image.fromarray(pixels).save(path)
        paths[name] = str(path)
    return paths


def read_header(path):
    data = path.read_bytes()
    version, layer, h, q, k, l_img = struct.unpack_from("<HIIIII", data, 4)
    return {"version": version, "layer": layer, "h": h, "q": q, "k": k, "l_img": l_img, "data": data}


def test_exports_validate_under_primary_strict_checker(loaded, images, tmp_path):
    model, processor = loaded
    for i, (text, image_name) in enumerate(SAMPLES):
        out = tmp_path / f"sample_{i}.cat1"
        export_attention(
            ExportRequest(
                image_path=images[image_name],
                instruction=text,
                layer_index=1,
                output_path=str(out),
            ),
            model=model,
            processor=processor,
        )
        result = subprocess.run(
            ["ambimap", "--outdir", str(tmp_path), "validate",
             "--tensor", str(out), "--softmax-rows"],
            capture_output=True,
            text=True,
        )
        assert result.returncode == 0, result.stderr
        assert json.loads(result.stdout)["valid"] is True


def test_export_header_and_roles(loaded, images, tmp_path):
    model, processor = loaded
    out = tmp_path / "t.cat1"
    export_attention(
        ExportRequest(images["two_apples.png"], "detect the apple", 1, str(out)),
        model=model,
        processor=processor,
    )
    header = read_header(out)
    assert header["l_img"] == 64
    assert header["k"] == header["l_img"] + header["q"]
    # roles live right after the payload
    offset = HEADER_SIZE + 4 * header["h"] * header["q"] * header["k"]
    roles = list(header["data"][offset : offset + header["q"]])
    # <bos> and "detect" both condition; "the apple" is content
    assert roles[:2] == [1, 1]
    assert roles[2:] == [0, 0]


def test_export_is_deterministic(loaded, images, tmp_path):
    model, processor = loaded
    outs = []
    for tag in ("a", "b"):
        out = tmp_path / f"{tag}.cat1"
        export_attention(
            ExportRequest(images["mug.png"], "detect the red mug", 2, str(out)),
            model=model,
            processor=processor,
        )
        outs.append(out.read_bytes())
    assert outs[0] == outs[1]


def test_layer_out_of_range(loaded, images, tmp_path):
    model, processor = loaded
    with pytest.raises(ValueError, match="range"):
        export_attention(
            ExportRequest(images["mug.png"], "detect the mug", 99, str(tmp_path / "x.cat1")),
            model=model,
            processor=processor,
        )


def test_missing_image_fails(loaded, tmp_path):
    model, processor = loaded
    with pytest.raises(OSError):
        export_attention(
            ExportRequest(str(tmp_path / "nope.png"), "detect it", 1, str(tmp_path / "x.cat1")),
            model=model,
            processor=processor,
        )


def test_cli_roundtrip(checkpoint, images, tmp_path, capsys):
    out = tmp_path / "cli.cat1"
    code = dispatch(
        ["--checkpoint", str(checkpoint), "--image", images["bottles.png"],
         "--text", "detect the bottle", "--layer", "0", "--out", str(out)]
    )
    assert code == 0
    info = json.loads(capsys.readouterr().out)
    assert info["bytes"] == out.stat().st_size


def test_cli_usage_error(capsys):
    assert dispatch(["--image", "x.png"]) == 2


def test_cli_domain_error(checkpoint, images, tmp_path, capsys):
    code = dispatch(
        ["--checkpoint", str(checkpoint), "--image", images["mug.png"],
         "--text", "detect", "--layer", "77", "--out", str(tmp_path / "x.cat1")]
    )
    assert code == 1
    assert "error" in capsys.readouterr().err
