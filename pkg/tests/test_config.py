import pytest

from tftransformer.config import CONFIG_ENV, ConfigError, RunConfig, load_config
from tftransformer.model import ModelConfig
from tftransformer.training import TrainConfig


def test_defaults_match_component_defaults():
    cfg = load_config(None)
    assert cfg.model_config() == ModelConfig()
    assert cfg.train_config() == TrainConfig()
    f = cfg.feature_config()
    assert (f.stft.frame_len_samples, f.stft.hop_samples, f.stft.fft_size) == (320, 160, 512)
    assert (f.n_mels, f.segment_frames, f.normalize) == (80, 80, False)
    assert cfg.labels().names == ("angry", "happy", "neutral", "sad")


def test_file_then_overrides(tmp_path):
    path = tmp_path / "run.ini"
    path.write_text("[train]\nepochs = 5\nlr = 0.01\n[features]\nlabels = casia\n")
    cfg = load_config(path, [("train.lr", "0.5"), ("model.ablation", "T+F")])
    assert cfg.get("train", "epochs") == 5
    assert cfg.get("train", "lr") == 0.5
    assert cfg.model_config().n_classes == 6
    assert cfg.model_config().ablation_name == "T+F"


def test_env_var_default(tmp_path, monkeypatch):
    path = tmp_path / "env.ini"
    path.write_text("[train]\nseed = 42\n")
    monkeypatch.setenv(CONFIG_ENV, str(path))
    assert load_config(None).get("train", "seed") == 42


@pytest.mark.parametrize(
    "text, match",
    [
        ("[train]\nepoch = 5\n", "unknown key train.epoch"),
        ("[trainer]\nepochs = 5\n", "unknown section"),
        ("[train]\nepochs = five\n", "cannot parse"),
        ("[features]\nnormalize = maybe\n", "cannot parse"),
        ("epochs = 5\n", "malformed"),
    ],
)
def test_rejections(tmp_path, text, match):
    path = tmp_path / "bad.ini"
    path.write_text(text)
    with pytest.raises(ConfigError, match=match):
        load_config(path)


def test_bad_override_shape():
    with pytest.raises(ConfigError):
        load_config(None, [("epochs", "3")])


def test_invalid_train_values():
    with pytest.raises(ConfigError):
        load_config(None, [("train.batch_size", "0")]).train_config()


def test_optional_values():
    cfg = load_config(None, [("train.clip_norm", "1.5"), ("train.target_train_war", "none")])
    assert cfg.train_config().clip_norm == 1.5
    assert cfg.train_config().target_train_war is None


def test_resolved_roundtrip(tmp_path):
    cfg = load_config(None, [("train.lr", "0.0003"), ("features.labels", "x,y,z"), ("model.c1", "8")])
    path = cfg.write(tmp_path)
    again = load_config(path)
    assert again.values == cfg.values
    assert again.to_ini() == cfg.to_ini()
    assert again.labels().names == ("x", "y", "z")


def test_every_key_written(tmp_path):
    text = RunConfig().to_ini()
    for section, keys in RunConfig().values.items():
        assert f"[{section}]" in text
        for key in keys:
            assert f"\n{key} = " in text
