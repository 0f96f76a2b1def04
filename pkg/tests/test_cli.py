import json
import subprocess
import sys

import pytest

from efficient_ser.cli import apply_overrides, main

TINY_SETS = [
    "model.fe_channels=[8,8,8,8,8,8,8]", "model.d_model=16", "model.n_layers=3", "model.n_heads=2",
    "model.d_ffn=32", "model.pos_kernel=4", "model.pos_groups=2",
    "epochs=1", "batch_size=4", "eval_batch_size=4",
]


def sets(*extra):
    out = []
    for item in (*TINY_SETS, *extra):
        out += ["--set", item]
    return out


@pytest.fixture()
def env(tmp_path, monkeypatch):
    monkeypatch.setenv("EFFICIENT_SER_OUT", str(tmp_path / "runs"))
    return tmp_path


@pytest.fixture()
def corpus(env, capsys):
    code = main(["gen-corpus", "--out", str(env / "corpus"), "--seed", "1",
                 "--set", "n_samples=12", "--set", "min_seconds=0.1", "--set", "max_seconds=0.2",
                 "--set", "split_counts=[6,3,3]"])
    assert code == 0
    capsys.readouterr()
    return env / "corpus" / "manifest.jsonl"


def last_json(text):
    return json.loads(text.strip().splitlines()[-1])


def test_overrides_nest_and_parse_json():
    body = apply_overrides({"freeze": {"mode": "full"}}, ["freeze.mode=partial", "freeze.n=3", "name=x y"])
    assert body == {"freeze": {"mode": "partial", "n": 3}, "name": "x y"}


def test_gen_corpus(corpus):
    assert len(corpus.read_text().splitlines()) == 12
    assert json.loads((corpus.parent / "corpus_config.json").read_text())["seed"] == 1


def test_train_partial_single_seed(env, corpus, capsys):
    config = env / "run.json"
    config.write_text(json.dumps({"name": "p", "data": str(corpus)}))
    code = main(["train", "--config", str(config), *sets("freeze.mode=partial", "freeze.n=3"), "--seed", "0"])
    out, err = capsys.readouterr()
    assert code == 0
    run_dir = env / "runs" / last_json(out)["run_dir"].split("/")[-1]
    assert run_dir.is_dir() and run_dir.name.endswith("-seed0")
    effective = json.loads((run_dir / "config.json").read_text())
    assert effective["freeze"] == {"mode": "partial", "n": 3} and effective["seed"] == 0
    assert json.loads(err.strip().splitlines()[-1])["freeze"]["mode"] == "partial"


def test_train_then_eval_and_build_cache(env, corpus, capsys):
    assert main(["train", *sets(f"data={corpus}", "name=full"), "--seed", "0"]) == 0
    run_dir = last_json(capsys.readouterr()[0])["run_dir"]
    ckpt = f"{run_dir}/best.fcft"
    assert main(["eval", "--checkpoint", ckpt, "--data", str(corpus), "--split", "dev"]) == 0
    assert set(last_json(capsys.readouterr()[0])) == {"split", "activation_ccc", "valence_ccc"}
    assert main(["build-cache", "--checkpoint", ckpt, "--data", str(corpus), "--split-layer", "2",
                 "--out", str(env / "cache")]) == 0
    assert last_json(capsys.readouterr()[0])["entries"] == 12
    assert main(["build-cache", "--checkpoint", ckpt, "--data", str(corpus), "--split-layer", "2",
                 "--out", str(env / "cache")]) == 0
    capsys.readouterr()
    assert main(["build-cache", "--checkpoint", ckpt, "--data", str(corpus), "--split-layer", "1",
                 "--out", str(env / "cache")]) == 2
    out, err = capsys.readouterr()
    assert out == "" and "refusing to overwrite" in err


def test_build_cache_without_model(env, capsys):
    assert main(["build-cache", "--split-layer", "9"]) == 1
    out, err = capsys.readouterr()
    assert out == "" and "missing model" in err and len(err.strip().splitlines()) == 1


def test_unknown_flag_prints_usage(env, capsys):
    assert main(["train", "--bogus"]) == 1
    out, err = capsys.readouterr()
    assert out == "" and "usage:" in err and "--bogus" in err


def test_missing_subcommand(capsys):
    assert main([]) == 1


def test_validation_error_is_one_line(env, corpus, capsys):
    assert main(["train", *sets(f"data={corpus}", "precision=double"), "--seed", "0"]) == 1
    out, err = capsys.readouterr()
    assert out == "" and err.count("\n") == 1 and "precision" in err


def test_compare_schema(env, corpus, capsys):
    for name, extra in (("full_sp", []), ("partial3_mp", ["freeze.mode=partial", "freeze.n=3", "precision=mixed"])):
        assert main(["train", *sets(f"data={corpus}", f"name={name}", "seeds=[0,1]", *extra)]) == 0
    capsys.readouterr()
    code = main(["compare", "--baseline", "full_sp", "--against", "partial3_mp", "--bonferroni", "4"])
    out, _ = capsys.readouterr()
    assert code == 0
    body = json.loads(out)
    assert set(body) == {"test_activation", "test_valence"}
    for metric, rep in body.items():
        (cmp,) = rep["comparisons"]
        assert rep["n_comparisons"] == 4 and rep["metric"] == metric
        assert {"a", "b", "t", "dof", "p_raw", "p_adjusted", "significant"} <= set(cmp)
        assert cmp["p_adjusted"] == min(1.0, 4 * cmp["p_raw"])


def test_compare_unknown_run(env, capsys):
    assert main(["compare", "--baseline", "nope", "--against", "other"]) == 1


def test_bench_params_only(env, capsys):
    code = main(["bench", "--preset", "base-equivalent", "--params-only", "--out", str(env / "bench")])
    out, _ = capsys.readouterr()
    assert code == 0
    rows = [ln.split() for ln in out.splitlines()[1:9]]
    assert [r[0] for r in rows] == ["full", "partial3", "partial2", "partial1", "lora", "cache3", "cache2", "cache1"]
    assert [r[-1] for r in rows] == ["90M", "26M", "19M", "12M", "300K", "21M", "14M", "7M"]
    assert not (env / "runs").exists()
    assert (env / "bench" / "params.png").read_bytes()[:4] == b"\x89PNG"
    assert json.loads((env / "bench" / "report.json").read_text())["params_only"] is True


def test_bench_trains_and_renders(env, corpus, capsys):
    code = main(["bench", "--plans", "full,cache1", *sets(f"data={corpus}"), "--seed", "0",
                 "--out", str(env / "bench")])
    out, _ = capsys.readouterr()
    assert code == 0
    assert "cached1" in out and "0.0%" in out
    for name in ("report.json", "report.txt", "params.png", "ccc.png", "time.png"):
        assert (env / "bench" / name).stat().st_size > 0


def test_console_script_help():
    proc = subprocess.run([sys.executable, "-m", "efficient_ser.cli", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0
    for sub in ("gen-corpus", "build-cache", "train", "eval", "bench", "compare"):
        assert sub in proc.stdout
