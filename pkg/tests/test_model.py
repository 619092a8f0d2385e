import numpy as np
import pytest

from soundlm.errors import ConfigError, InputError
from soundlm.layout import PAD_SLOT, Sample, pack, pack_single
from soundlm.model import Model, ModelConfig, build_target_plan
from soundlm.vocab import SPECIAL_NAMES, NEWLINE_WORD, UnifiedVocab


def tiny_vocab(n_q=2, k=4):
    words = SPECIAL_NAMES + [NEWLINE_WORD] + [f"w{i}" for i in range(8)]
    return UnifiedVocab(n_q=n_q, codebook_size=k, words=list(words))


def tiny_model(seed=0, **overrides):
    kwargs = dict(
        layers=1, dim=16, heads=2, ff=24, context=128, n_q=2, codebook_size=4,
        frame_dim=4, enc_dim=8, dtype="float64",
    )
    kwargs.update(overrides)
    cfg = ModelConfig(**kwargs)
    return Model(cfg, tiny_vocab(cfg.n_q, cfg.codebook_size), seed=seed)


def make_sample(vocab, sid, n_q, rng, with_audio_steps=True, with_audio_in=False, n_text=4):
    from soundlm.data import SeqBuilder

    b = SeqBuilder(vocab, n_q)
    b.text([vocab.BOS, vocab.USER])
    if with_audio_in:
        frames = rng.normal(size=(5, 4))
        b.audio_input(frames, (5 + 1) // 2)
    b.text(rng.integers(13, 13 + 8, size=3).tolist())
    b.text([vocab.ASSISTANT])
    b.text(rng.integers(13, 13 + 8, size=n_text).tolist(), out=True)
    if with_audio_steps:
        grid = rng.integers(0, 4, size=(n_q, 3))
        b.text([vocab.BOA], out=True)
        b.audio_steps(grid, out=True)
        b.text([vocab.EOA], out=True)
    else:
        b.text([vocab.EOS], out=True)
    return b.build(sid, "t2a" if with_audio_steps else "text")


def test_gradients_match_finite_differences():
    model = tiny_model(seed=3)
    model.encoder_frozen = False
    n_params = sum(v.size for v in model.params.values())
    assert n_params <= 10_000
    rng = np.random.default_rng(0)
    vocab = model.vocab
    samples = [
        make_sample(vocab, "a", 2, rng, with_audio_steps=True),
        make_sample(vocab, "b", 2, rng, with_audio_steps=False, with_audio_in=True),
    ]
    packs = pack(samples, budget=128)
    loss, _, grads = model.loss(packs, with_grads=True)
    h = 1e-5
    worst = 0.0
    for name, value in model.params.items():
        flat = value.reshape(-1)
        gflat = grads[name].reshape(-1)
        for j in range(flat.size):
            keep = flat[j]
            flat[j] = keep + h
            up, _ = model.loss(packs)
            flat[j] = keep - h
            dn, _ = model.loss(packs)
            flat[j] = keep
            fd = (up - dn) / (2 * h)
            rel = abs(gflat[j] - fd) / max(abs(gflat[j]) + abs(fd), 1e-6)
            worst = max(worst, rel)
    assert worst < 1e-4, f"worst relative gradient error {worst}"


def test_embed_step_rules():
    model = tiny_model()
    zero = model.embed_step(np.array([PAD_SLOT, PAD_SLOT]))
    assert np.array_equal(zero, np.zeros(16))
    one = model.embed_step(np.array([PAD_SLOT, 2]))
    row = model.params["embed"][model.vocab.audio_id(1, 2)]
    assert np.array_equal(one, row)
    with pytest.raises(InputError):
        model.embed_step(10_000)


def test_embed_step_slot_permutation_changes_sum():
    model = tiny_model()
    a = model.embed_step(np.array([1, 2]))
    b = model.embed_step(np.array([2, 1]))
    assert not np.allclose(a, b)


def test_zero_head_gives_uniform_softmax():
    model = tiny_model()
    model.params["text_head"][:] = 0.0
    rng = np.random.default_rng(1)
    s = make_sample(model.vocab, "u", 2, rng, with_audio_steps=False)
    cache = model.forward(pack_single(s))
    z = cache["h"] @ model.params["text_head"]
    p = np.exp(z) / np.exp(z).sum(axis=-1, keepdims=True)
    assert np.allclose(p, 1.0 / model.vocab.text_size)


def test_causality():
    model = tiny_model(seed=5)
    rng = np.random.default_rng(2)
    s1 = make_sample(model.vocab, "c", 2, rng, with_audio_steps=True)
    p1 = pack_single(s1)
    h1 = model.forward(p1, keep_cache=False)
    # perturb the last position's content
    s2 = Sample(
        s1.id, s1.task, s1.kinds.copy(), s1.tokens.copy(), s1.slots.copy(),
        s1.out_mask.copy(),
    )
    s2.tokens[-1] = model.vocab.EOS
    h2 = model.forward(pack_single(s2), keep_cache=False)
    assert np.allclose(h1[:-1], h2[:-1], atol=1e-12)
    assert not np.allclose(h1[-1], h2[-1])


def test_segment_isolation_and_swap():
    model = tiny_model(seed=7)
    rng = np.random.default_rng(3)
    a = make_sample(model.vocab, "a", 2, rng)
    b = make_sample(model.vocab, "b", 2, rng, with_audio_steps=False)
    ab = pack([a, b], budget=128)[0]
    ba = pack([b, a], budget=128)[0]
    h_ab = model.forward(ab, keep_cache=False)
    h_ba = model.forward(ba, keep_cache=False)
    spans_ab = dict(zip(ab.sample_ids, ab.sample_spans))
    spans_ba = dict(zip(ba.sample_ids, ba.sample_spans))
    for sid in ("a", "b"):
        (s0, e0), (s1, e1) = spans_ab[sid], spans_ba[sid]
        assert np.allclose(h_ab[s0:e0], h_ba[s1:e1], atol=1e-5)
    # and both match the standalone forward
    h_a = model.forward(pack_single(a), keep_cache=False)
    s0, e0 = spans_ab["a"]
    assert np.allclose(h_ab[s0:e0], h_a, atol=1e-5)


def test_loss_denominator_counts_frames_as_one():
    model = tiny_model(seed=9)
    rng = np.random.default_rng(4)
    vocab = model.vocab
    from soundlm.data import SeqBuilder

    b = SeqBuilder(vocab, 2)
    b.text([vocab.BOS])
    b.text(rng.integers(13, 21, size=4).tolist(), out=True)  # 4 text outputs
    b.audio_steps(rng.integers(0, 4, size=(2, 1)), out=True)  # one frame
    s = b.build("d", "t2a")
    plan = build_target_plan(pack_single(s), 2)
    denom = plan.n_text + plan.n_slots / 2
    assert denom == 5.0


def test_doubling_audio_frames_shifts_denominator_by_frame_count():
    model = tiny_model(seed=10)
    rng = np.random.default_rng(44)
    from soundlm.data import SeqBuilder

    def denom(frames):
        b = SeqBuilder(model.vocab, 2)
        b.text([model.vocab.BOS])
        b.text(rng.integers(13, 21, size=3).tolist(), out=True)
        b.audio_steps(np.zeros((2, frames), dtype=int), out=True)
        plan = build_target_plan(pack_single(b.build("x", "t2a")), 2)
        return plan.n_text + plan.n_slots / 2

    assert denom(12) - denom(6) == 6.0


def test_uniform_logits_loss_is_log_vocab():
    model = tiny_model(seed=11)
    model.params["text_head"][:] = 0.0
    for n in range(2):
        model.params[f"audio_head.{n}"][:] = 0.0
    rng = np.random.default_rng(5)
    s_text = make_sample(model.vocab, "t", 2, rng, with_audio_steps=False)
    loss_t, _ = model.loss(pack_single(s_text))
    assert abs(loss_t - np.log(model.vocab.text_size)) < 1e-12
    from soundlm.data import SeqBuilder

    b = SeqBuilder(model.vocab, 2)
    b.text([model.vocab.BOS, model.vocab.BOA])
    b.audio_steps(rng.integers(0, 4, size=(2, 5)), out=True)
    s_audio = b.build("au", "t2a")
    loss_a, _ = model.loss(pack_single(s_audio))
    assert abs(loss_a - np.log(4)) < 1e-12


def test_packed_loss_equals_weighted_unpacked():
    model = tiny_model(seed=13)
    rng = np.random.default_rng(6)
    samples = [
        make_sample(model.vocab, f"s{i}", 2, rng, with_audio_steps=(i % 2 == 0))
        for i in range(4)
    ]
    packs = pack(samples, budget=128)
    packed_loss, _ = model.loss(packs)
    num = den = 0.0
    for s in samples:
        li, _ = model.loss(pack_single(s))
        wi = s.effective_tokens()
        num += li * wi
        den += wi
    assert abs(packed_loss - num / den) < 1e-6


def test_empty_loss_mask_is_input_error():
    model = tiny_model()
    rng = np.random.default_rng(7)
    s = make_sample(model.vocab, "e", 2, rng, with_audio_steps=False)
    s.out_mask[:] = False
    with pytest.raises(InputError):
        model.loss(pack_single(s))


def test_encode_audio_halves_rate():
    model = tiny_model()
    assert model.encode_audio(np.zeros((2, 4))).shape == (1, 16)
    assert model.encode_audio(np.zeros((5, 4))).shape == (3, 16)
    with pytest.raises(InputError):
        model.encode_audio(np.zeros((0, 4)))


def test_zero_input_zero_bias_encoder_preacts():
    model = tiny_model()
    model.params["enc.conv.b"][:] = 0.0
    _, cache = model.encode_audio(np.zeros((4, 4)), with_cache=True)
    z1 = cache[1]
    assert np.all(z1 == 0.0)


def test_frozen_encoder_gets_no_gradient():
    model = tiny_model(seed=15)
    model.encoder_frozen = True
    rng = np.random.default_rng(8)
    s = make_sample(model.vocab, "f", 2, rng, with_audio_steps=False, with_audio_in=True)
    _, _, grads = model.loss(pack_single(s), with_grads=True)
    assert np.all(grads["enc.conv.w"] == 0.0)
    assert np.any(grads["adapter.w"] != 0.0)  # adapter always learns
    model.encoder_frozen = False
    _, _, grads = model.loss(pack_single(s), with_grads=True)
    assert np.any(grads["enc.conv.w"] != 0.0)


def test_incremental_decode_matches_full_forward():
    model = tiny_model(seed=17)
    rng = np.random.default_rng(9)
    s = make_sample(model.vocab, "i", 2, rng, with_audio_steps=True)
    p = pack_single(s)
    h_full = model.forward(p, keep_cache=False)
    state = model.start_decode()
    rows = []
    for pos in range(len(s)):
        if s.kinds[pos] == 0:
            rows.append(state.step_token(int(s.tokens[pos])))
        else:
            rows.append(state.step_slots(s.slots[pos]))
    assert np.allclose(np.stack(rows), h_full, atol=1e-10)


def test_context_overflow_rejected():
    model = tiny_model()
    rng = np.random.default_rng(10)
    s = make_sample(model.vocab, "o", 2, rng, n_text=126)
    with pytest.raises(InputError):
        model.forward(pack_single(s))


def test_checkpoint_roundtrip(tmp_path):
    model = tiny_model(seed=19, dtype="float32")
    path = tmp_path / "m.ualm"
    model.save(path)
    loaded = Model.load(path, vocab=model.vocab)
    assert loaded.cfg == model.cfg
    for name in model.params:
        assert np.array_equal(loaded.params[name], model.params[name])


def test_param_groups_cover_everything():
    model = tiny_model()
    groups = {model.param_group(n) for n in model.params}
    assert groups == {"backbone", "embeddings", "encoder", "adapter"}
    c1 = model.param_checksum("backbone")
    model.params["embed"][0, 0] += 1.0
    assert model.param_checksum("backbone") == c1
    assert model.param_checksum() != c1


def test_vocab_model_geometry_must_match():
    with pytest.raises(ConfigError):
        Model(ModelConfig(n_q=3, codebook_size=4, dim=16, heads=2), tiny_vocab(2, 4))
