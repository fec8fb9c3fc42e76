import json

from ambimap.cli import dispatch
from ambimap.loccodec import BoxNorm, encode_box


def run(capsys, *argv):
    code = dispatch(list(argv))
    captured = capsys.readouterr()
    return code, captured.out, captured.err


def test_unknown_subcommand_is_usage_error(capsys):
    code, _, err = run(capsys, "no-such-command")
    assert code == 2
    assert "invalid choice" in err


def test_missing_required_flag_is_usage_error(capsys):
    code, _, _ = run(capsys, "gen-attn")
    assert code == 2


def test_gen_attn_validate_inspect(tmp_path, capsys):
    out = tmp_path / "t.cat1"
    code, stdout, _ = run(
        capsys,
        "--outdir", str(tmp_path),
        "gen-attn", "--text", "Get the apple", "--out", str(out), "--seed", "3",
    )
    assert code == 0
    info = json.loads(stdout)
    assert info["image_tokens"] == 64
    assert out.exists()
    assert (tmp_path / "gen-attn.manifest").exists()

    code, stdout, _ = run(
        capsys, "--outdir", str(tmp_path), "validate", "--tensor", str(out), "--softmax-rows"
    )
    assert code == 0
    assert json.loads(stdout)["valid"] is True

    code, stdout, _ = run(capsys, "--outdir", str(tmp_path), "inspect", "--tensor", str(out))
    assert code == 0
    header = json.loads(stdout)
    assert header["keys"] == header["queries"]
    assert header["roles"]["image"] == 64


def test_validate_corrupt_file_domain_error(tmp_path, capsys):
    bad = tmp_path / "bad.cat1"
    bad.write_bytes(b"JUNKJUNKJUNK")
    code, _, err = run(capsys, "--outdir", str(tmp_path), "validate", "--tensor", str(bad))
    assert code == 1
    assert "error" in err


def test_gen_attn_reproducible_bytes(tmp_path, capsys):
    a = tmp_path / "a.cat1"
    b = tmp_path / "b.cat1"
    for out in (a, b):
        code, _, _ = run(
            capsys,
            "--outdir", str(tmp_path),
            "gen-attn", "--text", "Get the mug", "--out", str(out), "--seed", "5",
        )
        assert code == 0
    assert a.read_bytes() == b.read_bytes()


def test_aggregate_writes_map_and_figure(tmp_path, capsys):
    tensor = tmp_path / "t.cat1"
    run(capsys, "--outdir", str(tmp_path), "gen-attn", "--text", "Get the cup", "--out", str(tensor))
    map_path = tmp_path / "m.f32"
    fig_path = tmp_path / "m.png"
    code, stdout, err = run(
        capsys,
        "--outdir", str(tmp_path),
        "aggregate", "--tensor", str(tensor), "--out", str(map_path),
        "--ascii", "--fig", str(fig_path),
    )
    assert code == 0
    info = json.loads(stdout)
    assert info["grid_side"] == 8
    assert abs(info["pooled_sum"] - 1.0) < 1e-6
    assert map_path.exists()
    assert fig_path.exists()
    assert len(err.splitlines()) >= 8  # ascii art on stderr


def test_aggregate_reproducible_bytes(tmp_path, capsys):
    tensor = tmp_path / "t.cat1"
    run(capsys, "--outdir", str(tmp_path), "gen-attn", "--text", "Get the cup", "--out", str(tensor))
    m1, m2 = tmp_path / "m1.f32", tmp_path / "m2.f32"
    for m in (m1, m2):
        assert run(
            capsys, "--outdir", str(tmp_path), "aggregate", "--tensor", str(tensor), "--out", str(m)
        )[0] == 0
    assert m1.read_bytes() == m2.read_bytes()


def test_full_detection_pipeline_smoke(tmp_path, capsys):
    data_dir = tmp_path / "maps"
    code, _, _ = run(
        capsys,
        "--outdir", str(tmp_path),
        "gen-data", "--kind", "maps", "--n", "60", "--grid-side", "16",
        "--seed", "42", "--out", str(data_dir),
    )
    assert code == 0

    params = tmp_path / "probe.apb"
    history = tmp_path / "history.csv"
    fig = tmp_path / "train.png"
    code, stdout, _ = run(
        capsys,
        "--outdir", str(tmp_path),
        "train-probe", "--data", str(data_dir), "--out", str(params),
        "--epochs", "2", "--batch-size", "16", "--lr", "1e-3", "--seed", "42",
        "--history", str(history), "--fig", str(fig),
    )
    assert code == 0
    info = json.loads(stdout)
    assert info["epochs"] == 2
    assert history.exists() and fig.exists()
    assert history.read_text().startswith("epoch,train_loss,val_f1")

    code, stdout, _ = run(
        capsys,
        "--outdir", str(tmp_path),
        "detect", "--map", str(data_dir / "map_00001.f32"), "--params", str(params),
        "--fig", str(tmp_path / "detect.png"),
    )
    assert code == 0
    result = json.loads(stdout)
    assert result["decision"] in ("ambiguous", "unambiguous")
    assert 0.0 < result["p_amb"] < 1.0
    assert isinstance(result["peaks"], list)


def test_detect_from_tensor_aggregates_on_the_fly(tmp_path, capsys):
    tensor = tmp_path / "t.cat1"
    run(capsys, "--outdir", str(tmp_path), "gen-attn", "--text", "Get the apple",
        "--out", str(tensor), "--grid-side", "8")
    maps_dir = tmp_path / "maps"
    run(capsys, "--outdir", str(tmp_path), "gen-data", "--kind", "maps", "--n", "8",
        "--grid-side", "8", "--seed", "2", "--out", str(maps_dir))
    params = tmp_path / "p.apb"
    run(capsys, "--outdir", str(tmp_path), "train-probe", "--data", str(maps_dir),
        "--out", str(params), "--epochs", "1", "--batch-size", "4", "--val-fraction", "0")
    code, stdout, _ = run(
        capsys, "--outdir", str(tmp_path),
        "detect", "--tensor", str(tensor), "--params", str(params),
    )
    assert code == 0
    assert "p_amb" in json.loads(stdout)


def test_linearize_streams_pairs_to_stdout(tmp_path, capsys):
    corpus = tmp_path / "corpus.jsonl"
    run(capsys, "--outdir", str(tmp_path), "gen-data", "--kind", "dialogs",
        "--n", "3", "--seed", "1", "--out", str(corpus))
    code, stdout, _ = run(capsys, "--outdir", str(tmp_path), "linearize", "--corpus", str(corpus))
    assert code == 0
    pairs = [json.loads(line) for line in stdout.splitlines()]
    assert len(pairs) >= 3
    assert all("prefix" in p and "target" in p for p in pairs)


def test_detect_grid_mismatch_domain_error(tmp_path, capsys):
    data_dir = tmp_path / "maps"
    run(capsys, "--outdir", str(tmp_path), "gen-data", "--kind", "maps", "--n", "4",
        "--grid-side", "16", "--seed", "1", "--out", str(data_dir))
    params = tmp_path / "p.apb"
    run(capsys, "--outdir", str(tmp_path), "train-probe", "--data", str(data_dir),
        "--out", str(params), "--epochs", "1", "--batch-size", "2", "--val-fraction", "0")

    other_dir = tmp_path / "maps8"
    run(capsys, "--outdir", str(tmp_path), "gen-data", "--kind", "maps", "--n", "2",
        "--grid-side", "8", "--seed", "1", "--out", str(other_dir))
    code, _, err = run(
        capsys,
        "--outdir", str(tmp_path),
        "detect", "--map", str(other_dir / "map_00000.f32"), "--params", str(params),
    )
    assert code == 1
    assert "grid" in err


def test_dialog_with_script_and_oracle(tmp_path, capsys):
    script = tmp_path / "script.txt"
    script.write_text("Which apple?\n<loc0100><loc0100><loc0300><loc0300>\n")
    oracle = tmp_path / "oracle.txt"
    oracle.write_text("The red one\n")
    code, stdout, _ = run(
        capsys,
        "--outdir", str(tmp_path),
        "dialog", "--request", "Get the apple",
        "--script", str(script), "--oracle", str(oracle),
    )
    assert code == 0
    result = json.loads(stdout)
    assert result["turns"] == [["Which apple?", "The red one"]]
    assert len(result["box"]) == 4


def test_dialog_interactive_reads_stdin(tmp_path, capsys, monkeypatch):
    import io

    script = tmp_path / "script.txt"
    script.write_text("Which apple?\n<loc0100><loc0100><loc0300><loc0300>\n")
    monkeypatch.setattr("sys.stdin", io.StringIO("The red one\n"))
    code, stdout, err = run(
        capsys, "--outdir", str(tmp_path),
        "dialog", "--request", "Get the apple", "--script", str(script), "--interactive",
    )
    assert code == 0
    assert json.loads(stdout)["turns"] == [["Which apple?", "The red one"]]
    assert "robot: Which apple?" in err


def test_dialog_turn_limit_domain_error(tmp_path, capsys):
    script = tmp_path / "script.txt"
    script.write_text("Which one?\n" * 20)
    oracle = tmp_path / "oracle.txt"
    oracle.write_text("hmm\n" * 20)
    code, _, err = run(
        capsys,
        "--outdir", str(tmp_path),
        "dialog", "--request", "Get it", "--script", str(script),
        "--oracle", str(oracle), "--k-max", "3",
    )
    assert code == 1
    assert "3" in err


def test_corpus_linearize_and_eval(tmp_path, capsys):
    corpus = tmp_path / "corpus.jsonl"
    code, _, _ = run(
        capsys,
        "--outdir", str(tmp_path),
        "gen-data", "--kind", "dialogs", "--n", "20", "--seed", "7", "--out", str(corpus),
    )
    assert code == 0

    pairs_path = tmp_path / "pairs.jsonl"
    code, stdout, _ = run(
        capsys, "--outdir", str(tmp_path),
        "linearize", "--corpus", str(corpus), "--out", str(pairs_path),
    )
    assert code == 0
    summary = json.loads(stdout)
    assert summary["records"] == 20
    lines = pairs_path.read_text().splitlines()
    assert summary["pairs"] == len(lines)
    grounding = [json.loads(l) for l in lines if json.loads(l)["is_grounding"]]
    assert len(grounding) == 20

    code, stdout, _ = run(
        capsys, "--outdir", str(tmp_path),
        "eval-guesser", "--corpus", str(corpus), "--echo-gold",
    )
    assert code == 0
    result = json.loads(stdout)
    assert result["acc_at_iou"] == 1.0
    assert result["n"] == 20


def test_eval_guesser_with_predictions_file(tmp_path, capsys):
    corpus = tmp_path / "corpus.jsonl"
    run(capsys, "--outdir", str(tmp_path), "gen-data", "--kind", "dialogs",
        "--n", "5", "--seed", "8", "--out", str(corpus))
    predictions = tmp_path / "preds.txt"
    predictions.write_text(
        "\n".join([encode_box(BoxNorm(0, 0, 1, 1))] * 5) + "\n"
    )
    code, stdout, _ = run(
        capsys, "--outdir", str(tmp_path),
        "eval-guesser", "--corpus", str(corpus), "--predictions", str(predictions),
    )
    assert code == 0
    assert 0.0 <= json.loads(stdout)["acc_at_iou"] <= 1.0


def test_sweep_layers_outputs(tmp_path, capsys):
    csv_path = tmp_path / "sweep.csv"
    fig_path = tmp_path / "sweep.png"
    code, stdout, err = run(
        capsys,
        "--outdir", str(tmp_path),
        "sweep-layers", "--layers", "0,1", "--seed", "4", "--n-scenes", "8",
        "--epochs", "1", "--batch-size", "8", "--num-layers", "2",
        "--csv", str(csv_path), "--fig", str(fig_path),
    )
    assert code == 0
    rows = [json.loads(line) for line in stdout.splitlines()]
    assert [r["layer"] for r in rows] == [0, 1]
    assert "layer" in err  # aligned table on stderr
    assert csv_path.read_text().startswith("layer,f1,accuracy")
    assert fig_path.exists()


def test_manifest_records_parameters(tmp_path, capsys):
    out = tmp_path / "t.cat1"
    run(capsys, "--outdir", str(tmp_path), "gen-attn", "--text", "x", "--out", str(out), "--seed", "9")
    manifest = (tmp_path / "gen-attn.manifest").read_text()
    assert "subcommand=gen-attn" in manifest
    assert "seed=9" in manifest
    assert f"out={out}" in manifest
