import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from capdistill import synthworld as sw
from capdistill.synthworld import BOS, EOS, PAD, UNK


def small_cfg(**kw):
    base = dict(n_train=20, n_val=6, n_test=6, n_audio_only=10,
                n_frames=40, n_mels=8, n_event_types=4, noise_sigma=0.1,
                min_event_frames=5, max_event_frames=9)
    base.update(kw)
    return sw.WorldConfig(**base)


# ---------------------------------------------------------------------------
# generation


def test_generation_deterministic_bit_identical():
    cfg = small_cfg()
    a = sw.generate_dataset(cfg, seed=3)
    b = sw.generate_dataset(cfg, seed=3)
    for (ca, capa), (cb, capb) in zip(a.train + a.val + a.test, b.train + b.val + b.test):
        assert (ca.features == cb.features).all()
        assert ca.events == cb.events
        assert capa.references == capb.references
    for pa, pb in zip(a.audio_only, b.audio_only):
        assert (pa.features == pb.features).all()


def test_different_seeds_differ():
    cfg = small_cfg()
    a = sw.generate_dataset(cfg, seed=3)
    b = sw.generate_dataset(cfg, seed=4)
    assert not (a.train[0][0].features == b.train[0][0].features).all()


def test_zero_noise_single_event_equals_template():
    cfg = small_cfg(noise_sigma=0.0, max_events=1, n_train=12)
    ds = sw.generate_dataset(cfg, seed=5)
    world = ds.world
    for clip, _ in ds.train:
        assert len(clip.events) == 1
        e, onset, dur = clip.events[0]
        expected = world.events[e].render(cfg.n_frames, onset, dur)
        assert (clip.features == expected).all()


def test_split_sizes_and_disjoint_indices():
    cfg = small_cfg(n_train=200, n_audio_only=2000, n_val=10, n_test=10,
                    n_event_types=8)
    ds = sw.generate_dataset(cfg, seed=0)
    assert len(ds.train) == 200
    assert len(ds.audio_only) == 2000
    indices = [c.seed for c in ds.all_clips()]
    assert len(indices) == len(set(indices))


def test_events_lie_within_clip_and_ordered():
    cfg = small_cfg(n_train=50)
    ds = sw.generate_dataset(cfg, seed=9)
    for clip, _ in ds.train:
        assert 1 <= len(clip.events) <= cfg.max_events
        onsets = [o for _, o, _ in clip.events]
        assert onsets == sorted(onsets)
        for _, onset, dur in clip.events:
            assert 0 <= onset and onset + dur <= cfg.n_frames


def test_event_profiles_distinguishable():
    for k in (4, 8, 12):
        events = sw.make_event_types(k, 16)
        for a in range(k):
            for b in range(a + 1, k):
                pa, pb = events[a].profile, events[b].profile
                cos = pa @ pb / (np.linalg.norm(pa) * np.linalg.norm(pb))
                assert cos < 0.9


def test_audio_only_pool_matches_train_distribution():
    cfg = small_cfg(n_train=400, n_audio_only=400, n_val=6, n_test=6)
    ds = sw.generate_dataset(cfg, seed=2)
    train_feats = np.stack([c.features for c, _ in ds.train])
    pool_feats = np.stack([c.features for c in ds.audio_only])
    m_t, m_p = train_feats.mean(), pool_feats.mean()
    v_t, v_p = train_feats.var(), pool_feats.var()
    assert abs(m_t - m_p) / abs(m_t) < 0.05
    assert abs(v_t - v_p) / v_t < 0.05


def test_diversity_warning_for_oversized_request():
    cfg = small_cfg(n_event_types=4, max_events=2, n_train=700, n_audio_only=0)
    # 4 + 4*3 = 16 distinct sequences; 700 > 10 * 16 warns
    with pytest.warns(UserWarning, match="distinct"):
        sw.generate_dataset(cfg, seed=1)


def test_no_warning_at_moderate_sizes(recwarn):
    sw.generate_dataset(small_cfg(), seed=1)
    assert not [w for w in recwarn if "distinct" in str(w.message)]


# ---------------------------------------------------------------------------
# captions / tokenizer


@pytest.fixture(scope="module")
def world():
    return sw.World(small_cfg(n_event_types=8))


def test_caption_single_event_template0(world):
    ids = world.caption_for([0], 0)
    assert ids == world.tokenizer.tokenize("a dog")
    assert ids[0] == BOS and ids[-1] == EOS


def test_caption_two_events_template1(world):
    ids = world.caption_for([0, 1], 1)
    assert world.tokenizer.detokenize(ids) == "dog then siren"


def test_caption_two_events_template0(world):
    ids = world.caption_for([2, 4], 0)
    assert world.tokenizer.detokenize(ids) == "a bell followed by a bird"


def test_caption_deterministic(world):
    assert world.caption_for([3, 5], 1) == world.caption_for([3, 5], 1)


def test_caption_unknown_event(world):
    with pytest.raises(sw.VocabularyError):
        world.caption_for([99], 0)


def test_references_have_distinct_surface_text():
    cfg = small_cfg(n_caption_templates=4)
    ds = sw.generate_dataset(cfg, seed=6)
    for _, caps in ds.train:
        texts = [ds.tokenizer.detokenize(r) for r in caps.references]
        assert len(set(texts)) == len(texts) >= 2


def test_references_mention_events_in_order():
    ds = sw.generate_dataset(small_cfg(n_train=40), seed=7)
    for clip, caps in ds.train:
        for ref in caps.references:
            assert ds.tokenizer.event_ids_in(ref) == clip.event_ids


def test_tokenize_round_trip(world):
    tok = world.tokenizer
    assert tok.detokenize(tok.tokenize("a dog")) == "a dog"


def test_tokenize_empty(world):
    assert world.tokenizer.tokenize("") == [BOS, EOS]


def test_tokenize_unknown_word(world):
    ids = world.tokenizer.tokenize("a zebra")
    assert UNK in ids


def test_special_token_ids_fixed(world):
    assert (BOS, EOS, PAD, UNK) == (0, 1, 2, 3)
    assert world.tokenizer.id_to_token[:4] == ["<bos>", "<eos>", "<pad>", "<unk>"]


@settings(max_examples=40, deadline=None)
@given(st.lists(st.sampled_from(sw.EVENT_NAMES[:8] + ["a", "then", "sound"]),
                min_size=0, max_size=6))
def test_round_trip_identity_on_vocabulary(words):
    tok = sw.VocabTokenizer(8)
    text = " ".join(words)
    assert tok.detokenize(tok.tokenize(text)) == text


def test_vocab_size_small(world):
    assert 16 <= len(world.tokenizer) <= 40


# ---------------------------------------------------------------------------
# persistence


def test_save_load_round_trip(tmp_path):
    cfg = small_cfg()
    ds = sw.generate_dataset(cfg, seed=8)
    sw.save_dataset(ds, tmp_path)
    loaded = sw.load_dataset(tmp_path)
    assert loaded.config == cfg
    assert len(loaded.train) == len(ds.train)
    for (ca, capa), (cb, capb) in zip(ds.train, loaded.train):
        assert (ca.features == cb.features).all()
        assert [tuple(e) for e in ca.events] == [tuple(e) for e in cb.events]
        assert capa.references == capb.references
    for pa, pb in zip(ds.audio_only, loaded.audio_only):
        assert (pa.features == pb.features).all()


def test_save_is_reproducible(tmp_path):
    cfg = small_cfg()
    ds = sw.generate_dataset(cfg, seed=8)
    sw.save_dataset(ds, tmp_path / "a")
    sw.save_dataset(sw.generate_dataset(cfg, seed=8), tmp_path / "b")
    assert (tmp_path / "a" / "features.bin").read_bytes() == \
        (tmp_path / "b" / "features.bin").read_bytes()
    assert (tmp_path / "a" / "manifest.json").read_bytes() == \
        (tmp_path / "b" / "manifest.json").read_bytes()


def test_manifest_lists_offsets(tmp_path):
    ds = sw.generate_dataset(small_cfg(), seed=8)
    sw.save_dataset(ds, tmp_path)
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    frame_bytes = manifest["frame_shape"][0] * manifest["frame_shape"][1] * 4
    offsets = [c["offset"] for c in manifest["clips"]]
    assert offsets == list(range(0, frame_bytes * len(offsets), frame_bytes))


def test_load_missing_manifest(tmp_path):
    with pytest.raises(FileNotFoundError):
        sw.load_dataset(tmp_path)


def test_config_validation():
    with pytest.raises(ValueError):
        small_cfg(n_event_types=3).validate()
    with pytest.raises(ValueError):
        small_cfg(n_caption_templates=9).validate()
