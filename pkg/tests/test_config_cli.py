import hashlib
import json

import pytest

from tryonlab import cli
from tryonlab.config import RunConfig, config_from_dict, load_config, save_config
from tryonlab.errors import ValidationError
from tryonlab.pipeline import ABLATION_LATTICE, variant_name


def test_empty_config_defaults(tmp_path):
    p = tmp_path / "c.json"
    p.write_text("{}")
    cfg = load_config(p)
    assert cfg.diffusion.lambda_cons == 0.15
    assert cfg.sampler.steps == 50
    assert cfg.diffusion.cfg_drop == 0.2
    assert cfg.flatten.weights == (0.1, 10.0, 0.01)
    assert cfg.warp.weights == (0.2, 0.01, 6.0)
    assert load_config(None) == cfg


def test_config_roundtrip(tmp_path):
    cfg = config_from_dict({"seed": 3, "diffusion": {"steps": 10}, "sampler": {"freeu": False}})
    save_config(cfg, tmp_path / "c.json")
    assert load_config(tmp_path / "c.json") == cfg


@pytest.mark.parametrize("raw,field", [
    ({"diffusion": {"lambda_cons": -0.1}}, "diffusion.lambda_cons"),
    ({"flatten": {"lambda_sec": -1}}, "flatten.lambda_sec"),
    ({"warp": {"lambda_tv": -6}}, "warp.lambda_tv"),
    ({"sampler": {"steps": 0}}, "sampler.steps"),
    ({"bogus": 1}, "bogus"),
])
def test_validation_names_field(raw, field):
    with pytest.raises(ValidationError, match=field.replace(".", r"\.")):
        config_from_dict(raw)


def test_zero_lambda_allowed():
    assert config_from_dict({"diffusion": {"lambda_cons": 0}}).diffusion.lambda_cons == 0


def test_fingerprint_sections():
    a = RunConfig()
    b = config_from_dict({"diffusion": {"steps": 5}})
    assert a.fingerprint("data") == b.fingerprint("data")
    assert a.fingerprint("diffusion") != b.fingerprint("diffusion")


def test_ablation_lattice_rows():
    names = [n for n, _, _ in ABLATION_LATTICE]
    assert names == ["baseline", "prior", "prior_cons", "prior_cons_posterior"]
    variants = {variant_name(dict(global_cond=True, **f)) for _, f, _ in ABLATION_LATTICE}
    assert variants == {"baseline", "prior", "prior_cons"}
    assert ABLATION_LATTICE[-1][2] == "clothes_posterior"
    assert all(init == "gaussian" for _, _, init in ABLATION_LATTICE[:3])


def _small_config(tmp_path, **extra):
    raw = {"data": {"count": 6, "train_fraction": 0.5}, **extra}
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(raw))
    return str(p)


def _manifest_hash(root):
    h = hashlib.sha256()
    for name in ("dataset.json", "manifest.jsonl"):
        h.update((root / name).read_bytes())
    return h.hexdigest()


def test_gen_data_twice_identical(tmp_path, capsys):
    cfg = _small_config(tmp_path)
    assert cli.main(["gen-data", "--config", cfg, "--out", str(tmp_path / "a")]) == 0
    first = _manifest_hash(tmp_path / "a" / "data")
    assert cli.main(["gen-data", "--config", cfg, "--out", str(tmp_path / "a")]) == 0
    assert _manifest_hash(tmp_path / "a" / "data") == first


@pytest.mark.parametrize("command,needs", [
    (["train-autoencoder"], "gen-data"),
    (["train-diffusion"], "train-autoencoder"),
    (["train-flatten"], "train-autoencoder"),
    (["sample", "--person", "s00000", "--garment", "s00001"], "train-autoencoder"),
])
def test_missing_dependencies_exit_code(tmp_path, capsys, command, needs):
    cfg = _small_config(tmp_path)
    out = str(tmp_path / "run")
    if needs != "gen-data":
        assert cli.main(["gen-data", "--config", cfg, "--out", out]) == 0
        capsys.readouterr()
    code = cli.main(command + ["--config", cfg, "--out", out])
    assert code == 3
    assert f"`{needs}`" in capsys.readouterr().err


def test_invalid_config_exit_code(tmp_path, capsys):
    p = tmp_path / "bad.json"
    p.write_text(json.dumps({"diffusion": {"lambda_cons": -1}}))
    assert cli.main(["gen-data", "--config", str(p), "--out", str(tmp_path)]) == 2
    assert "lambda_cons" in capsys.readouterr().err


def test_unwritable_output_exit_code(tmp_path, capsys):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    cfg = _small_config(tmp_path)
    assert cli.main(["gen-data", "--config", cfg, "--out", str(blocker / "sub")]) == 1


def test_unknown_command_rejected():
    with pytest.raises(SystemExit):
        cli.main(["dance"])
