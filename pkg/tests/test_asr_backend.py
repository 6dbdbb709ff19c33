import itertools
from functools import lru_cache

import numpy as np
import pytest

from models import MultichannelWaveform
from utils.asr_backend import (AlignmentError, DecodingError, Vocabulary, asr_loss, attention_decoder_loss,
                               beam_search_decode, corpus_wer, ctc_loss, decoder_forward, encoder_forward,
                               greedy_decode, init_asr_params, joint_loss, read_hypotheses, sequence_score,
                               word_error_rate, write_hypotheses)
from utils.gradcheck import grad_check, small_frontend_config, tiny_model_config
from utils.neural_frontend import frontend_backward, frontend_forward, init_frontend_params


def _log_probs(rng, U, V):
    logits = rng.standard_normal((U, V))
    return logits - np.log(np.sum(np.exp(logits), axis=1, keepdims=True))


def _collapse(path, blank=0):
    out = []
    previous = None
    for token in path:
        if token != previous and token != blank:
            out.append(token)
        previous = token
    return out


def test_vocabulary_layout():
    vocab = Vocabulary(['alpha', 'bravo'])
    assert (vocab.blank, vocab.sos, vocab.eos, vocab.pad) == (0, 1, 2, 3)
    assert vocab.encode(['bravo', 'alpha']) == [5, 4, 2]
    assert vocab.decode([5, 4, 2, 5]) == ['bravo', 'alpha']
    with pytest.raises(DecodingError):
        Vocabulary(['alpha', '<eos>'])
    with pytest.raises(DecodingError, match='not in vocabulary'):
        vocab.encode(['charlie'])


def test_ctc_single_path(rng):
    log_probs = _log_probs(rng, 1, 3)
    loss, _ = ctc_loss(log_probs, [2])
    assert loss == pytest.approx(-log_probs[0, 2], rel=1e-12)


def test_ctc_matches_exhaustive_path_sum(rng):
    for V in (2, 3):
        for U in range(1, 5):
            for length in range(0, 3):
                for target in itertools.product(range(1, V), repeat=length):
                    log_probs = _log_probs(rng, U, V)
                    total = sum(np.exp(sum(log_probs[u, s] for u, s in enumerate(path)))
                                for path in itertools.product(range(V), repeat=U)
                                if _collapse(path) == list(target))
                    if total == 0.0:
                        with pytest.raises(AlignmentError, match='no feasible alignment'):
                            ctc_loss(log_probs, list(target))
                        continue
                    loss, _ = ctc_loss(log_probs, list(target))
                    assert loss == pytest.approx(-np.log(total), rel=1e-10)


def test_ctc_gradient_matches_finite_differences(rng):
    blocks = {'log_probs': _log_probs(rng, 3, 3)}

    def fn(b):
        loss, grad = ctc_loss(b['log_probs'], [1, 2])
        return loss, {'log_probs': grad}
    report = grad_check(fn, blocks)
    assert report['log_probs'] < 1e-4


def test_ctc_rejects_infeasible_targets(rng):
    with pytest.raises(AlignmentError, match='no feasible alignment'):
        ctc_loss(_log_probs(rng, 2, 4), [1, 1])
    with pytest.raises(DecodingError, match='out of range'):
        ctc_loss(_log_probs(rng, 3, 4), [7])


def test_encoder_subsampled_length(rng):
    cfg = tiny_model_config(subsampling=4)
    params = init_asr_params(cfg, 7, 4, rng)
    for T, U in ((4, 1), (5, 2), (8, 2)):
        h, _ = encoder_forward(rng.standard_normal((T, 4)), params, cfg)
        assert h.shape == (U, cfg.d_model)
    with pytest.raises(DecodingError, match='empty input'):
        encoder_forward(rng.standard_normal((3, 4)), params, cfg)
    with pytest.raises(DecodingError, match='empty input'):
        encoder_forward(np.zeros((0, 4)), params, cfg)


def test_encoder_is_order_sensitive(rng):
    cfg = tiny_model_config()
    params = init_asr_params(cfg, 7, 4, rng)
    features = rng.standard_normal((8, 4))
    h, _ = encoder_forward(features, params, cfg)
    shuffled, _ = encoder_forward(features[rng.permutation(8)], params, cfg)
    assert not np.allclose(h, shuffled)


def test_uniform_decoder_loss(rng):
    cfg = tiny_model_config()
    params = init_asr_params(cfg, 7, 4, rng)
    params['decoder.out.W'][...] = 0.0
    params['decoder.out.b'][...] = 0.0
    target = [4, 6, 2]
    loss, _, _ = attention_decoder_loss(rng.standard_normal((3, 8)), target, params, cfg)
    assert loss == pytest.approx(len(target) * np.log(7), rel=1e-12)
    with pytest.raises(DecodingError, match='end with eos'):
        attention_decoder_loss(rng.standard_normal((3, 8)), [4, 6], params, cfg)


def test_decoder_is_causal(rng):
    cfg = tiny_model_config()
    params = init_asr_params(cfg, 7, 4, rng)
    h = rng.standard_normal((3, 8))
    a, _ = decoder_forward(h, [1, 4, 5, 4], params, cfg)
    b, _ = decoder_forward(h, [1, 4, 6, 4], params, cfg)
    np.testing.assert_allclose(a[:2], b[:2], rtol=0, atol=1e-12)
    assert not np.allclose(a[2], b[2])


def test_joint_loss_endpoints_and_gradient_mix(rng):
    cfg = tiny_model_config()
    params = init_asr_params(cfg, 7, 4, rng)
    features = rng.standard_normal((9, 4))
    target = [4, 5, 2]
    runs = {lam: asr_loss(features, target, params, cfg, ctc_weight=lam) for lam in (0.0, 0.1, 1.0)}
    assert runs[0.0][0]['theta'] == runs[0.0][0]['theta_att']
    assert runs[1.0][0]['theta'] == runs[1.0][0]['theta_ctc']
    assert joint_loss(2.0, 4.0, 0.1) == pytest.approx(3.8)
    with pytest.raises(ValueError):
        joint_loss(1.0, 1.0, 1.5)

    for name in params:
        expected = 0.1 * runs[1.0][1].get(name, 0.0) + 0.9 * runs[0.0][1].get(name, 0.0)
        np.testing.assert_allclose(runs[0.1][1].get(name, 0.0), expected, atol=1e-12)
    np.testing.assert_allclose(runs[0.1][2], 0.1 * runs[1.0][2] + 0.9 * runs[0.0][2], atol=1e-12)


def test_beam_of_one_is_greedy(rng):
    cfg = tiny_model_config(max_decode_len=5)
    for seed in range(5):
        params = init_asr_params(cfg, 8, 4, np.random.default_rng(seed))
        h = rng.standard_normal((3, 8))
        greedy = greedy_decode(h, params, cfg)
        beam = beam_search_decode(h, params, cfg, beam_width=1)
        assert beam.tokens == greedy.tokens
        assert beam.score == greedy.score


def _all_sequences(words, max_len):
    for length in range(max_len):
        for body in itertools.product(words, repeat=length):
            yield list(body) + [Vocabulary.eos]


def test_exhaustive_beam_equals_brute_force(rng):
    cfg = tiny_model_config(max_decode_len=3)
    vocab = Vocabulary(['a', 'b'])
    word_ids = [4, 5]
    for seed in range(20):
        params = init_asr_params(cfg, len(vocab), 4, np.random.default_rng(100 + seed))
        h = rng.standard_normal((3, 8))
        scored = sorted(((sequence_score(h, seq, params, cfg), seq) for seq in _all_sequences(word_ids, 3)),
                        key=lambda pair: (-pair[0], pair[1]))
        best_score, best_tokens = scored[0]
        exhaustive = beam_search_decode(h, params, cfg, beam_width=27)
        assert exhaustive.tokens == best_tokens
        assert exhaustive.score == pytest.approx(best_score, abs=1e-9)
        # length-normalized scores need not grow with width; only the exhaustive bound holds
        for width in (1, 2, 4, 8):
            assert beam_search_decode(h, params, cfg, beam_width=width).score <= exhaustive.score + 1e-9


def test_beam_width_must_be_positive(rng):
    cfg = tiny_model_config()
    params = init_asr_params(cfg, 6, 4, rng)
    with pytest.raises(DecodingError):
        beam_search_decode(rng.standard_normal((2, 8)), params, cfg, beam_width=0)


def test_word_error_rate_examples():
    assert word_error_rate(['a', 'b'], ['a', 'b'])['wer'] == 0.0
    report = word_error_rate(['a', 'c'], ['a', 'b', 'c'])
    assert (report['substitutions'], report['insertions'], report['deletions']) == (0, 0, 1)
    assert report['wer'] == pytest.approx(1 / 3)
    with pytest.raises(DecodingError, match='empty reference'):
        word_error_rate(['a'], [])
    assert corpus_wer([(['a'], ['a', 'b']), (['x', 'y'], ['y'])]) == pytest.approx(2 / 3)


def test_word_error_rate_against_recursive_oracle(rng):
    words = ['a', 'b', 'c']

    for _ in range(100):
        ref = [words[i] for i in rng.integers(3, size=rng.integers(1, 7))]
        hyp = [words[i] for i in rng.integers(3, size=rng.integers(0, 7))]

        @lru_cache(maxsize=None)
        def distance(i, j):
            if i == 0 or j == 0:
                return i + j
            return min(distance(i - 1, j) + 1, distance(i, j - 1) + 1,
                       distance(i - 1, j - 1) + (ref[i - 1] != hyp[j - 1]))

        report = word_error_rate(hyp, ref)
        edits = report['substitutions'] + report['insertions'] + report['deletions']
        assert edits == distance(len(ref), len(hyp))
        alignment = report['alignment']
        assert [a['ref'] for a in alignment if a['ref'] is not None] == ref
        assert [a['hyp'] for a in alignment if a['hyp'] is not None] == hyp
        assert all((a['ref'] == a['hyp']) == (a['op'] == 'ok') for a in alignment if a['op'] in ('ok', 'sub'))


def test_hypothesis_file_format(tmp_path):
    path = str(tmp_path / 'hyp.txt')
    write_hypotheses(path, {'utt2': 'bravo', 'utt1': 'alpha charlie', 'utt3': ''})
    with open(path) as f:
        assert f.readline() == 'utt1\talpha charlie\n'
    assert read_hypotheses(path) == {'utt1': 'alpha charlie', 'utt2': 'bravo', 'utt3': ''}


def test_joint_loss_reaches_the_spatial_filters(rng):
    fcfg = small_frontend_config('projection')
    cfg = tiny_model_config()
    params = init_frontend_params(fcfg, rng)
    init_asr_params(cfg, 7, fcfg.feature_dim, rng, store=params)
    wave = MultichannelWaveform(samples=rng.standard_normal((2, 64)), sample_rate=16000)
    features, cache = frontend_forward(wave, params, fcfg)
    _, _, g_features = asr_loss(features, [4, 2], params, cfg)
    grads = frontend_backward(g_features, cache, params)
    assert np.any(grads['frontend.H_re'] != 0.0)
    assert np.any(grads['frontend.H_im'] != 0.0)
