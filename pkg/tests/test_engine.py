import json
import math

import numpy as np
import pytest

import reference
from earlyexit.confidence import ConfidenceKind, ThresholdPolicy, argmax
from earlyexit.engine import (
    ModelBackend,
    PropagationMode,
    baseline_flops,
    bench,
    check_flops,
    flops_per_token,
    generate_adaptive,
    generate_full,
    generate_static,
    layer_flops,
    propagate_state,
    write_traces,
)
from earlyexit.model import EOS, KVCache, ModelConfig, Weights, init_weights
from earlyexit.synthetic import SynthTask, SyntheticModel, SyntheticSpec, gen_dataset, synth_forward

PROMPTS = [[3, 4, 5, 6], [17, 2], [9, 9, 30, 1, 12], [5]]
SYNTH_PROMPTS = [[3, 4, 5, 6], [15, 2], [9, 9, 13, 1, 12], [5]]


@pytest.fixture(scope="module")
def model_backend(weights):
    clf = np.random.default_rng(3).normal(0, 0.2, size=weights.config.d_model)
    return ModelBackend(weights.with_exit_classifier(clf, -0.5))


@pytest.fixture(scope="module")
def synth_backend(ramp_spec):
    spec = SyntheticSpec(**{**ramp_spec.__dict__, "classifier": ((0.3,) * 16, 0.1)})
    return SyntheticModel(spec)


def naive_softmax_response(z):
    p = sorted((math.exp(v - max(z)) for v in z), reverse=True)
    return (p[0] - p[1]) / sum(p)


class TestFallback:
    @pytest.mark.parametrize("kind", ["softmax", "state", "classifier"])
    @pytest.mark.parametrize("backend_name", ["model_backend", "synth_backend"])
    def test_lambda_one_equals_full(self, kind, backend_name, request):
        backend = request.getfixturevalue(backend_name)
        for prompt in PROMPTS if backend_name == "model_backend" else SYNTH_PROMPTS:
            full = generate_full(backend, prompt)
            early = generate_adaptive(backend, prompt, kind, ThresholdPolicy(1.0, 0.0, backend.max_len))
            assert early.tokens == full.tokens
            assert early.exit_layers == full.exit_layers == [backend.num_layers] * len(full.steps)

    @pytest.mark.parametrize("kind", list(ConfidenceKind))
    def test_lambda_zero_exits_at_first_layer(self, kind, model_backend):
        out = generate_adaptive(model_backend, PROMPTS[0], kind, ThresholdPolicy(0.0))
        assert out.average_layers == 1.0

    def test_oracle_can_exit_early_at_lambda_one(self, synth_backend):
        out = generate_adaptive(synth_backend, (3, 4, 5), "oracle", ThresholdPolicy(1.0))
        assert min(out.exit_layers) < synth_backend.num_layers
        assert out.tokens == generate_full(synth_backend, (3, 4, 5)).tokens


class TestDecoding:
    def test_full_is_deterministic(self, model_backend):
        a, b = generate_full(model_backend, PROMPTS[2]), generate_full(model_backend, PROMPTS[2])
        assert a.tokens == b.tokens and a.exit_layers == b.exit_layers

    def test_full_matches_dense_greedy(self, weights):
        backend = ModelBackend(weights)
        for prompt in PROMPTS:
            emitted, _ = reference.greedy_dense(weights, prompt)
            out = generate_full(backend, prompt)
            assert [s.token for s in out.steps] == emitted

    def test_synthetic_full_equals_target(self, synth_backend):
        for ex in gen_dataset(SynthTask(seed=12), 20):
            out = generate_full(synth_backend, ex.prompt)
            assert out.tokens == ex.target
            assert out.ended_with_eos

    def test_trace_matches_scripted_simulation(self, ramp_spec):
        backend = SyntheticModel(ramp_spec)
        L = ramp_spec.num_layers
        for ex in gen_dataset(SynthTask(seed=13), 25):
            out = generate_adaptive(backend, ex.prompt, "softmax", ThresholdPolicy(0.5))
            expected = []
            for t in range(ramp_spec.max_len):
                _, z = synth_forward(ramp_spec, ex.prompt, t)
                confs, exit_layer = [], L
                for i in range(1, L):
                    confs.append(naive_softmax_response(list(z[i - 1])))
                    if confs[-1] >= 0.5:
                        exit_layer = i
                        break
                tok = int(np.argmax(z[exit_layer - 1]))
                expected.append((tok, exit_layer, confs))
                if tok == EOS:
                    break
            got = [(s.token, s.exit_layer, list(s.confidences)) for s in out.steps]
            assert [g[:2] for g in got] == [e[:2] for e in expected]
            for g, e in zip(got, expected):
                np.testing.assert_allclose(g[2], e[2], atol=1e-12)

    def test_trace_completeness(self, synth_backend):
        out = generate_adaptive(synth_backend, (4, 5, 6, 7), "softmax", ThresholdPolicy(0.7))
        assert out.average_layers == sum(out.exit_layers) / len(out.exit_layers)
        assert out.steps[-1].cum_layers == sum(out.exit_layers)
        for s in out.steps:
            assert len(s.confidences) == min(s.exit_layer, synth_backend.num_layers - 1)
            below = s.confidences[: s.exit_layer - 1]
            assert all(c < s.threshold for c in below)

    def test_decayed_threshold_in_trace(self, synth_backend):
        policy = ThresholdPolicy(0.5, 4.0, synth_backend.max_len)
        out = generate_adaptive(synth_backend, (4, 5, 6), "softmax", policy)
        expected = [0.45 + 0.1 * math.exp(-4.0 * t / synth_backend.max_len) for t in range(len(out.steps))]
        np.testing.assert_allclose([s.threshold for s in out.steps], expected, atol=1e-12)

    def test_state_measure_never_exits_at_layer_one(self, synth_backend):
        out = generate_adaptive(synth_backend, (4, 5), "state", ThresholdPolicy(1e-9))
        assert set(out.exit_layers) == {2}

    def test_classifier_requires_parameters(self, ramp_spec):
        with pytest.raises(ValueError, match="classifier"):
            generate_adaptive(SyntheticModel(ramp_spec), (3,), "classifier", ThresholdPolicy(0.5))

    def test_static_baseline(self, synth_backend):
        out = generate_static(synth_backend, (3, 4), 2)
        assert set(out.exit_layers) == {2}
        with pytest.raises(ValueError):
            generate_static(synth_backend, (3, 4), 0)

    def test_output_bounded_by_max_len(self, model_backend):
        out = generate_full(model_backend, PROMPTS[0])
        assert len(out.steps) <= model_backend.max_len
        assert EOS not in out.tokens

    def test_cost_non_increasing_as_lambda_decreases(self, ramp_spec):
        backend = SyntheticModel(ramp_spec)
        prompts = [ex.prompt for ex in gen_dataset(SynthTask(seed=14), 120)]
        means = []
        for lam in np.round(np.arange(1.0, -0.001, -0.05), 2):
            outs = [generate_adaptive(backend, p, "softmax", ThresholdPolicy(lam)) for p in prompts]
            means.append(np.mean([l for o in outs for l in o.exit_layers]))
        assert all(b <= a * 1.01 for a, b in zip(means, means[1:]))
        assert means[-1] == 1.0 and means[0] == ramp_spec.num_layers

    def test_traces_jsonl(self, synth_backend, tmp_path):
        outs = [generate_adaptive(synth_backend, p, "softmax", ThresholdPolicy(0.6)) for p in [(3, 4), (5,)]]
        write_traces(outs, tmp_path / "t.jsonl")
        lines = (tmp_path / "t.jsonl").read_text().splitlines()
        assert len(lines) == 2
        rec = json.loads(lines[0])
        assert set(rec) >= {"tokens", "exit_layers", "confidences", "thresholds", "flops", "wall_ms"}
        assert rec["exit_layers"] == outs[0].exit_layers


class TestPropagation:
    def _force_exit(self, weights, mode, exit_layer=1):
        """Run token 0 up to ``exit_layer``, propagate, then a second token through all layers."""
        backend = ModelBackend(weights)
        session = backend.start([4, 7, 1], mode)
        session.hidden(exit_layer)
        states = dict(session.states)
        token = argmax(session.logits(exit_layer))
        session.commit(token, exit_layer)
        session.hidden(weights.config.num_layers)
        return session, states

    def test_copy_hidden_reprojects_with_own_matrices(self, weights):
        session, states = self._force_exit(weights, "copy-hidden")
        cache = session.cache
        for k in range(2, 5):
            assert cache.proj_layer[k, 0] == k
            n = reference.rmsnorm(states[1].astype(np.float64), reference.tensor(weights, f"dec.{k}.norm1"))
            np.testing.assert_allclose(cache.keys[k, 0], reference.tensor(weights, f"dec.{k}.self.wk") @ n, atol=1e-6)
            np.testing.assert_allclose(cache.values[k, 0], reference.tensor(weights, f"dec.{k}.self.wv") @ n, atol=1e-6)

    def test_copy_kv_copies_verbatim(self, weights):
        session, _ = self._force_exit(weights, "copy-kv")
        cache = session.cache
        for k in range(2, 5):
            assert cache.proj_layer[k, 0] == 1
            assert cache.keys[k, 0].tobytes() == cache.keys[1, 0].tobytes()
            assert cache.values[k, 0].tobytes() == cache.values[1, 0].tobytes()

    def test_first_layer_debug_mode(self, weights):
        session, states = self._force_exit(weights, "first-layer", exit_layer=3)
        n = reference.rmsnorm(states[1].astype(np.float64), reference.tensor(weights, "dec.4.norm1"))
        np.testing.assert_allclose(session.cache.keys[4, 0], reference.tensor(weights, "dec.4.self.wk") @ n, atol=1e-6)

    def test_exit_at_last_layer_is_noop(self, small_config):
        cache = KVCache(small_config)
        before = cache.state.copy()
        propagate_state(cache, 0, small_config.num_layers, {}, "copy-hidden")
        propagate_state(cache, 0, small_config.num_layers, {}, "copy-kv")
        np.testing.assert_array_equal(cache.state, before)

    def test_tied_projections(self, small_config):
        # with every decoder layer sharing one set of matrices, copy-hidden
        # gives every skipped layer the projection of d^j, copy-kv the
        # projection of d^{j-1} (the exit layer's own input)
        tensors = dict(init_weights(small_config, seed=2).tensors)
        for k in range(2, small_config.num_layers + 1):
            for name in ("self.wq", "self.wk", "self.wv", "self.wo", "norm1"):
                tensors[f"dec.{k}.{name}"] = tensors[f"dec.1.{name}"]
        tied = Weights(small_config, tensors)
        hidden, _ = self._force_exit(tied, "copy-hidden")
        copied, states = self._force_exit(tied, "copy-kv")
        L = small_config.num_layers
        np.testing.assert_allclose(hidden.cache.keys[2:L + 1, 0], np.repeat(hidden.cache.keys[2:3, 0], L - 1, 0), atol=1e-6)
        np.testing.assert_array_equal(copied.cache.keys[2:L + 1, 0], np.repeat(copied.cache.keys[1:2, 0], L - 1, 0))
        wk = reference.tensor(tied, "dec.1.self.wk")
        g = reference.tensor(tied, "dec.1.norm1")
        np.testing.assert_allclose(hidden.cache.keys[3, 0], wk @ reference.rmsnorm(states[1].astype(float), g), atol=1e-6)
        np.testing.assert_allclose(copied.cache.keys[3, 0], wk @ reference.rmsnorm(states[0].astype(float), g), atol=1e-6)

    @pytest.mark.parametrize("mode", ["copy-hidden", "copy-kv"])
    def test_instrumented_provenance(self, model_backend, mode):
        # the oracle at lambda 1 mixes early and full-depth exits on this model
        for prompt in PROMPTS:
            out = generate_adaptive(model_backend, prompt, "oracle", ThresholdPolicy(1.0), mode)
            session = model_backend.start(prompt, mode)
            for s in out.steps[:-1]:
                session.hidden(s.exit_layer)
                session.commit(s.token, s.exit_layer)
            session.hidden(model_backend.num_layers)
            cache = session.cache
            T = len(out.steps) - 1
            for k in range(1, model_backend.num_layers + 1):
                for s, step in enumerate(out.steps[:T]):
                    if cache.state[k, s] != KVCache.CONCRETE:
                        continue
                    expected = k if (mode == "copy-hidden" or k <= step.exit_layer) else step.exit_layer
                    assert cache.proj_layer[k, s] == expected
        assert min(out.exit_layers) < model_backend.num_layers


class TestFlops:
    def test_baseline_formula(self, small_config):
        D, H, dk, dv, dff, N = 32, 2, 16, 16, 64, 12
        attn = lambda m: H * (2 * D * dk + 2 * D * dv + 2 * m * dk + 2 * m * dv)
        per_layer = attn(N / 2) + attn(N / 2) + 4 * D * dff
        assert layer_flops(small_config) == per_layer
        assert baseline_flops(small_config) == 4 * per_layer + D * 32

    def test_monotone_in_exit_layer(self, small_config):
        for kind in [None, *ConfidenceKind]:
            costs = [flops_per_token(small_config, j, kind) for j in range(1, 5)]
            assert costs == sorted(costs)
            assert costs[-1] >= baseline_flops(small_config)

    def test_classifier_cheaper_than_softmax(self, small_config):
        assert flops_per_token(small_config, 1, "classifier") < flops_per_token(small_config, 1, "softmax")
        assert check_flops(small_config, "classifier") == small_config.d_model + 1
        assert check_flops(small_config, "softmax") == small_config.d_model * small_config.vocab_size

    def test_reprojection_charged(self, small_config):
        cost = flops_per_token(small_config, 1, "oracle")
        expected = layer_flops(small_config) + 32 * 32 + 3 * 2 * 32 * 32
        assert cost == expected

    def test_out_of_range(self, small_config):
        with pytest.raises(ValueError):
            flops_per_token(small_config, 5)


class TestBench:
    def test_first_run_discarded(self, synth_backend):
        report = bench(synth_backend, [(3, 4)], runs=2)
        assert len(report.full_ms) == 1 and report.to_json()["timed_runs"] == 1
        assert report.speedup >= 0

    def test_needs_two_runs(self, synth_backend):
        with pytest.raises(ValueError):
            bench(synth_backend, [(3,)], runs=1)

    def test_lambda_zero_is_faster_on_model(self, model_backend):
        report = bench(model_backend, PROMPTS, runs=21, kind="softmax", policy=ThresholdPolicy(0.0))
        assert report.speedup > 1.0
