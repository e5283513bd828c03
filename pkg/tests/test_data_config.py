import numpy as np
import pytest

from timnet.config import ConfigError, RunConfig, format_config, load_config, parse_config
from timnet.data import (
    ManifestError, ManifestRow, default_input_T, load_dataset, read_manifest, write_manifest,
)
from timnet.dsp import AudioClip, FeatureConfig, mfcc, read_audio
from timnet.synth import CLASS_NAMES, synth_clip, write_corpus
from timnet.diffcore import RngStream


# --- run configuration ---------------------------------------------------------------


def test_config_round_trip():
    cfg = RunConfig(n_tabs=6, epochs=20, variant="no_ms", by_speaker=True, lr=5e-4)
    assert parse_config(format_config(cfg)) == cfg


def test_config_comments_and_blank_lines():
    cfg = parse_config("# quick run\n\nepochs = 3   # short\nplots = off\n")
    assert cfg.epochs == 3 and cfg.plots is False


@pytest.mark.parametrize("text,needle", [
    ("epochs = 3\nbatchsize = 9\n", ":2: unknown key 'batchsize'"),
    ("epochs = many\n", ":1: bad value for epochs"),
    ("shuffle = maybe\n", ":1: bad value for shuffle"),
    ("just words\n", ":1: expected key = value"),
])
def test_config_errors_carry_line_numbers(text, needle):
    with pytest.raises(ConfigError) as info:
        parse_config(text, "run.cfg")
    assert needle in str(info.value) and "run.cfg" in str(info.value)


@pytest.mark.parametrize("text", ["protocol = median", "variant = no_attention", "smoothing = 1.5", "n_mfcc = 200"])
def test_config_semantic_validation(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def test_load_config_file(tmp_path):
    (tmp_path / "c.cfg").write_text("folds = 5\n")
    assert load_config(tmp_path / "c.cfg").folds == 5


def test_derived_configs_agree():
    cfg = RunConfig(n_mfcc=20, n_mels=40, channels=16, seed=3)
    assert cfg.model_config(4, 50).n_features == 20
    assert cfg.train_config().seed == 3
    assert cfg.feature_config().n_mels == 40


# --- manifests --------------------------------------------------------------------------


def _manifest(tmp_path, body, header="path,label,speaker"):
    (tmp_path / "a.wav").write_bytes(b"")
    path = tmp_path / "m.csv"
    path.write_text(header + "\n" + body)
    return path


def test_manifest_paths_resolve_against_manifest_dir(tmp_path):
    m = read_manifest(_manifest(tmp_path, "a.wav,happy,s1\n\n"))
    assert m.rows[0].path == tmp_path / "a.wav"
    assert m.rows[0].line == 2 and m.vocab == ["happy"]


@pytest.mark.parametrize("header,body,needle", [
    ("file,label", "a.wav,x\n", ":1: header"),
    ("path,label", "a.wav\n", ":2: expected 2 fields"),
    ("path,label", "a.wav,x\nb.wav,y\n", ":3: file not found"),
    ("path,label,speaker", "a.wav,,s\n", ":2: empty label"),
])
def test_manifest_errors(tmp_path, header, body, needle):
    with pytest.raises(ManifestError, match=needle):
        read_manifest(_manifest(tmp_path, body, header))


def test_write_manifest_relative_paths(tmp_path):
    sub = tmp_path / "feats"
    sub.mkdir()
    (sub / "x.timf").write_bytes(b"")
    write_manifest(sub / "m.csv", [ManifestRow(sub / "x.timf", "sad", "s0")])
    assert (sub / "m.csv").read_text().splitlines()[1] == "x.timf,sad,s0"
    assert read_manifest(sub / "m.csv").rows[0].path == sub / "x.timf"


def test_default_input_length():
    assert default_input_T([77] * 19 + [200]) == 84
    assert default_input_T([10]) == 10


def test_empty_manifest_loads_empty_dataset(tmp_path):
    (tmp_path / "m.csv").write_text("path,label\n")
    data, T = load_dataset(read_manifest(tmp_path / "m.csv"), FeatureConfig())
    assert len(data) == 0


def test_unknown_label_against_vocab(toy_corpus):
    with pytest.raises(ManifestError, match="not in the model vocabulary"):
        load_dataset(read_manifest(toy_corpus), FeatureConfig(), 77, vocab=["c0_rising"])


# --- synthetic corpus -------------------------------------------------------------------------


def test_toy_dataset_shape(toy_dataset):
    assert toy_dataset.features.shape == (60, 77, 39)
    assert toy_dataset.vocab == list(CLASS_NAMES)
    assert np.bincount(toy_dataset.labels).tolist() == [20, 20, 20]


def test_corpus_is_byte_identical_per_seed(tmp_path):
    a = write_corpus(tmp_path / "a", 2, seed=7).parent
    b = write_corpus(tmp_path / "b", 2, seed=7).parent
    c = write_corpus(tmp_path / "c", 2, seed=8).parent
    names = sorted(p.name for p in a.iterdir())
    assert len(names) == 7
    assert all((a / n).read_bytes() == (b / n).read_bytes() for n in names)
    assert any((a / n).read_bytes() != (c / n).read_bytes() for n in names if n.endswith(".wav"))


def _centroid_track(x, sr=22050, L=1024, hop=256):
    """Spectral centroid per frame via a plain windowed DFT."""
    freqs = np.arange(L // 2 + 1) * sr / L
    out = []
    for s in range(0, len(x) - L + 1, hop):
        mag = np.abs(np.fft.rfft(x[s:s + L] * np.hanning(L)))
        out.append((freqs * mag).sum() / mag.sum())
    return np.array(out)


def test_sweep_classes_have_opposite_trajectories():
    gen = RngStream(11).generator()
    cfg = FeatureConfig()
    slopes, mf_slopes = {}, {}
    for label in (0, 1, 0, 1):
        x = synth_clip(label, gen)
        c = _centroid_track(x)
        slopes.setdefault(label, []).append(np.polyfit(np.arange(len(c)), c, 1)[0])
        m = mfcc(AudioClip(x, 22050), cfg).values[:, 1]
        mf_slopes.setdefault(label, []).append(np.polyfit(np.arange(len(m)), m, 1)[0])
    assert all(s > 0 for s in slopes[0]) and all(s < 0 for s in slopes[1])
    assert all(np.sign(a) == -np.sign(b) for a in mf_slopes[0] for b in mf_slopes[1])


def test_modulated_class_has_steady_pitch_and_moving_envelope():
    x = synth_clip(2, RngStream(4).generator())
    L = 1024
    peaks = [np.argmax(np.abs(np.fft.rfft(x[s:s + L] * np.hanning(L)))) for s in range(0, len(x) - L, 256)]
    assert max(peaks) - min(peaks) <= 1
    env = np.array([np.abs(x[s:s + 1024]).mean() for s in range(0, len(x) - 1024, 256)])
    assert env.max() > 3 * env.min()


def test_synth_clip_is_written_in_range(toy_corpus):
    clip = read_audio(toy_corpus.parent / "c0_rising_000.wav")
    assert clip.sample_rate == 22050 and clip.samples.size == 22050
    assert np.abs(clip.samples).max() < 1.0
