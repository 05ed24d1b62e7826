import numpy as np
import pytest

from icuseq.errors import InvalidSpec
from icuseq.ingest import parse_event_lines
from icuseq.metrics import auroc
from icuseq.synth import (
    ARCHETYPE_BOOST,
    EVENTS_PER_POSITIVE,
    SIGNAL_VALUE,
    GeneratorSpec,
    feature_definitions,
    generate_lines,
    oracle_cont_target,
    oracle_label,
    oracle_presence,
    read_task_file,
    write_task_file,
)


class TestSpecValidation:
    def test_minimums(self):
        with pytest.raises(InvalidSpec):
            GeneratorSpec(patients=0, features=10, rate=0.01)
        with pytest.raises(InvalidSpec):
            GeneratorSpec(patients=1, features=1, rate=0.01)
        with pytest.raises(InvalidSpec):
            GeneratorSpec(patients=1, features=5, rate=-0.1)
        with pytest.raises(InvalidSpec):
            GeneratorSpec(patients=1, features=5, rate=0.1, signal_incidence=1.5)

    def test_json_roundtrip(self):
        spec = GeneratorSpec(patients=3, features=8, rate=0.02, stay_hours=30.0)
        assert GeneratorSpec.from_json(spec.to_json()) == spec


class TestGeneration:
    def test_deterministic_bytes(self):
        spec = GeneratorSpec(patients=30, features=10, rate=0.01)
        a = "\n".join(generate_lines(spec, seed=5))
        b = "\n".join(generate_lines(spec, seed=5))
        assert a == b
        c = "\n".join(generate_lines(spec, seed=6))
        assert a != c

    def test_parses_cleanly(self):
        spec = GeneratorSpec(patients=25, features=15, rate=0.01, stay_jitter_hours=6.0)
        corpus = parse_event_lines(generate_lines(spec, seed=0))
        assert len(corpus.stays) == 25
        assert all(len(s.statics) == 4 for s in corpus.stays)

    def test_event_count_matches_poisson_oracle(self):
        spec = GeneratorSpec(patients=100, features=10, rate=0.02, signal_incidence=0.1)
        defs = feature_definitions(spec, seed=11)
        # archetype boosts average to 1 over a uniform archetype draw, so the
        # expected dynamic count is patients * minutes * rate * sum(multipliers)
        lam = spec.patients * spec.stay_hours * 60 * spec.rate * sum(d.rate_multiplier for d in defs)
        corpus = parse_event_lines(generate_lines(spec, seed=11))
        injected = sum(oracle_label(s, spec) for s in corpus.stays) * EVENTS_PER_POSITIVE
        observed = sum(len(s.dynamics) for s in corpus.stays) - injected
        assert abs(observed - lam) <= 3 * np.sqrt(lam)

    def test_zero_rate_gives_statics_only(self):
        spec = GeneratorSpec(patients=10, features=5, rate=0.0)
        corpus = parse_event_lines(generate_lines(spec, seed=0))
        assert all(not s.dynamics for s in corpus.stays)
        assert all(len(s.statics) == 4 for s in corpus.stays)

    def test_archetype_boost_expectation_is_one(self):
        spec = GeneratorSpec(patients=1, features=8, rate=0.01)
        other = (spec.n_archetypes - ARCHETYPE_BOOST) / (spec.n_archetypes - 1)
        assert ARCHETYPE_BOOST / spec.n_archetypes + other * (spec.n_archetypes - 1) / spec.n_archetypes \
            == pytest.approx(1.0)

    def test_durations_only_on_duration_sources(self):
        spec = GeneratorSpec(patients=40, features=20, rate=0.01)
        corpus = parse_event_lines(generate_lines(spec, seed=2))
        sources_with_duration = {r.source for s in corpus.stays for r in s.dynamics
                                 if r.duration_minutes > 0}
        assert sources_with_duration <= {"inputevents", "procedureevents"}
        assert sources_with_duration  # some durations were generated


ORACLE_SPEC = GeneratorSpec(patients=300, features=12, rate=0.01, signal_incidence=0.1)


@pytest.fixture(scope="module")
def corpus():
    return parse_event_lines(generate_lines(ORACLE_SPEC, seed=4))


class TestOracles:
    spec = ORACLE_SPEC

    def test_label_rule(self, corpus):
        for stay in corpus.stays:
            signal_in_first = any(
                str(r.value) == SIGNAL_VALUE
                and r.feature_text == self.spec.signal_feature_text
                and (r.timestamp - stay.start).total_seconds() / 60 < self.spec.window_minutes
                for r in stay.dynamics
            )
            assert oracle_label(stay, self.spec) == int(signal_in_first)

    def test_positive_rate_within_three_sigma(self, corpus):
        positives = sum(oracle_label(s, self.spec) for s in corpus.stays)
        n = len(corpus.stays)
        sigma = np.sqrt(n * 0.1 * 0.9)
        assert abs(positives - 0.1 * n) <= 3 * sigma

    def test_presence_oracle_separates(self, corpus):
        labels = np.array([oracle_label(s, self.spec) for s in corpus.stays])
        scores = np.array([oracle_presence(s, self.spec) for s in corpus.stays], dtype=float)
        assert auroc(scores, labels) >= 0.95

    def test_cont_target_shifted_by_label(self, corpus):
        targets = np.array([oracle_cont_target(s, self.spec) for s in corpus.stays])
        labels = np.array([oracle_label(s, self.spec) for s in corpus.stays])
        assert targets[labels == 1].mean() - targets[labels == 0].mean() == pytest.approx(
            self.spec.cont_target_shift, abs=0.5)


def test_task_file_roundtrip(tmp_path):
    spec = GeneratorSpec(patients=5, features=6, rate=0.01)
    path = str(tmp_path / "task.json")
    write_task_file(path, spec, "binary", seed=9)
    kind, back, seed = read_task_file(path)
    assert kind == "binary"
    assert back == spec
    assert seed == 9
