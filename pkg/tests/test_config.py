import pytest

from sdvae.config import ConfigError, TrainingConfig, dump_config, from_mapping, load_config, presets


def test_defaults():
    c = TrainingConfig()
    assert (c.lam, c.beta1, c.beta2, c.flow_length, c.dim_u, c.k) == (0.1, 0.1, 1.0, 1, 50, 10)
    assert c.v_mode == "sample" and c.effective_flow_length == 1


def test_sdvae1_decodes_expected_v():
    assert TrainingConfig(variant="sdvae1").v_mode == "expected"
    assert TrainingConfig(variant="sdvae1", decode_v="sample").v_mode == "sample"


def test_no_flow_without_iaf():
    assert TrainingConfig(iaf=False, flow_length=3).effective_flow_length == 0


def test_aliases_and_coercion():
    c = from_mapping({"lambda": "0.5", "T": "2", "iaf": "off", "hidden": "64,32", "lr": 0.01})
    assert c.lam == 0.5 and c.flow_length == 2 and c.iaf is False
    assert c.hidden == (64, 32) and c.learning_rate == 0.01


@pytest.mark.parametrize("mapping,field", [
    ({"lam": -1}, "lam"),
    ({"mu": -0.1}, "mu"),
    ({"variant": "sdvae3"}, "variant"),
    ({"dim_u": 0}, "dim_u"),
    ({"epochs": 1.5}, "epochs"),
    ({"iaf": "maybe"}, "iaf"),
    ({"nonsense": 1}, "nonsense"),
    ({"seed": None}, "seed"),
])
def test_invalid_values_name_the_field(mapping, field):
    with pytest.raises(ConfigError) as info:
        from_mapping(mapping)
    assert info.value.field == field


def test_presets_load():
    names = presets()
    for name in ("mnist_sdvae1", "mnist_sdvae1_iaf", "mnist_sdvae2", "mnist_sdvae2_iaf", "synthetic_sdvae2_iaf"):
        assert name in names
        load_config(name)
    c = load_config("mnist_sdvae2_iaf")
    assert c.variant == "sdvae2" and c.iaf and c.k == 10


def test_file_round_trip(tmp_path):
    c = TrainingConfig(lam=0.3, hidden=(7, 5), clip_grad=2.0, image_shape=(8, 8), encoder="conv")
    dump_config(c, tmp_path / "c.yaml")
    assert load_config(tmp_path / "c.yaml") == c


def test_missing_and_malformed(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_config(tmp_path / "nope.yaml")
    (tmp_path / "bad.yaml").write_text("- a\n- b\n")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "bad.yaml")


def test_replace_validates():
    with pytest.raises(ConfigError):
        TrainingConfig().replace(beta2=-1)
