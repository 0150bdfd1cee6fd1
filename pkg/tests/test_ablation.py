import numpy as np
import pytest

from cmfusion import ablation
from cmfusion.ablation import VARIANTS, VariantResult, format_ablation, parse_variants, run_ablation
from cmfusion.data import SyntheticSpec, synthesize_splits
from cmfusion.model import STREAMS, CMRobertaModel, ModelConfig
from cmfusion.train import TrainConfig


def test_registry_ids():
    assert list(VARIANTS) == ["full", "no-sca", "audio-only", "text-only", "no-mid", "no-residual",
                              "audio-no-lld", "audio-no-openl3"]


def test_parse_keeps_registry_order_once():
    assert parse_variants("no-sca, full,no-sca") == ["full", "no-sca"]
    with pytest.raises(KeyError, match="bogus"):
        parse_variants("full,bogus")


@pytest.mark.parametrize("vid, streams", [
    ("full", STREAMS),
    ("no-sca", ("mid", "r_a", "r_t")),
    ("audio-only", ("s_a", "r_a")),
    ("text-only", ("s_t", "r_t")),
    ("no-mid", ("c_a", "c_t", "s_a", "s_t", "r_a", "r_t")),
    ("no-residual", ("c_a", "c_t", "s_a", "s_t", "mid")),
])
def test_stream_surgery(vid, streams):
    cfg = VARIANTS[vid].apply(ModelConfig())
    assert cfg.streams == streams and cfg.aggregation_width == 128 * len(streams)


def test_audio_feature_surgery_splits_at_descriptor_width():
    base = ModelConfig()
    assert VARIANTS["audio-no-lld"].apply(base).audio_zero_range == (0, 6552)
    assert VARIANTS["audio-no-openl3"].apply(base).audio_zero_range == (6552, 12696)


def test_zeroed_columns_do_not_influence_output():
    base = ModelConfig(d_audio_in=10, d_text_in=4, d_model=8, n_classes=3, audio_lld_dim=6)
    model = CMRobertaModel(VARIANTS["audio-no-lld"].apply(base))
    r = np.random.default_rng(0)
    Xa, Xt = r.standard_normal((3, 10)), r.standard_normal((3, 4))
    Xb = Xa.copy()
    Xb[:, :6] = r.standard_normal((3, 6))
    np.testing.assert_array_equal(model(Xa, Xt).data, model(Xb, Xt).data)
    Xb[:, 7] += 1.0
    assert not np.array_equal(model(Xa, Xt).data, model(Xb, Xt).data)


def test_summary_statistics():
    r = VariantResult("full", "x", [0.5, 0.7, 0.9])
    assert r.mean == pytest.approx(0.7) and r.sd == pytest.approx(0.2)
    assert VariantResult("full", "x", [0.4]).sd == 0.0


def test_table_lists_each_variant_once():
    rows = [VariantResult(v, VARIANTS[v].description, [0.5, 0.6]) for v in ("full", "no-sca", "text-only")]
    text = format_ablation(rows)
    for v in ("full", "no-sca", "text-only"):
        assert sum(line.split()[0] == v for line in text.splitlines()) == 1
    assert "55.00 ± 7.07" in text


def _tiny_splits():
    spec = SyntheticSpec(d_a=4, d_t=3, n_classes=2, min_utterances=2, max_utterances=3, seed=0)
    return synthesize_splits(spec, {"train": 6, "val": 2, "test": 2})


def test_runner_is_deterministic_and_parallel_safe():
    sp = _tiny_splits()
    base = ModelConfig(d_audio_in=4, d_text_in=3, d_model=8, n_classes=2)
    tc = TrainConfig(max_epochs=2, patience=2, batch_size=4)
    args = (["no-sca", "full"], base, tc, sp["train"], sp["val"], sp["test"], (0, 1))
    serial = run_ablation(*args, threads=1)
    assert [r.id for r in serial] == ["full", "no-sca"] and all(len(r.scores) == 2 for r in serial)
    parallel = run_ablation(*args, threads=2)
    assert [r.scores for r in serial] == [r.scores for r in parallel]


def test_thread_count_from_environment(monkeypatch):
    monkeypatch.setenv("CMF_THREADS", "3")
    assert ablation._threads() == 3
    monkeypatch.setenv("CMF_THREADS", "many")
    assert ablation._threads() == 1
