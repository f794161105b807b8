import numpy as np
import pytest

from conftest import rich_config
from timealloc import synth
from timealloc.agents import MockAgent, PersonaRecord, render_prompt, run_batch
from timealloc.alignment import attribute_activity_cosine
from timealloc.estimator import fit_structural
from timealloc.model import FEATURES
from timealloc.rag import (
    KnowledgeInstance,
    MockEmbedder,
    RagError,
    augment_prompt,
    build_persona_sentence,
    default_kb_path,
    load_kb,
    make_augmenter,
    retrieve_top_k,
)

MARRIED_PERSONA = PersonaRecord(
    age=53,
    gender="male",
    race="Black",
    education="advanced degree",
    spouse_status="having a spouse",
    weekly_income=1173.0,
)

SINGLE_PERSONA = PersonaRecord(
    age=39,
    gender="female",
    race="White",
    education="some college without a bachelor's degree",
    spouse_status="having no spouse or unmarried partner",
    weekly_income=240.0,
)


class TestPersonaSentence:
    def test_married_example_byte_exact(self):
        assert build_persona_sentence(MARRIED_PERSONA) == (
            "A 53-year-old male Black with an advanced degree, a spouse, "
            "earning $1173.00 per week."
        )

    def test_single_example_byte_exact(self):
        assert build_persona_sentence(SINGLE_PERSONA) == (
            "A 39-year-old female White with some college education but no "
            "bachelor's degree, no spouse or unmarried partner, earning "
            "$240.00 per week."
        )

    def test_identical_personas_identical_sentences(self):
        import dataclasses

        assert build_persona_sentence(MARRIED_PERSONA) == build_persona_sentence(
            dataclasses.replace(MARRIED_PERSONA)
        )

    def test_partner_phrase(self):
        import dataclasses

        p = dataclasses.replace(
            SINGLE_PERSONA,
            age=30,
            education="bachelor's degree",
            spouse_status="having an unmarried partner",
            weekly_income=1730.76,
        )
        assert build_persona_sentence(p) == (
            "A 30-year-old female White with a bachelor's degree, an unmarried "
            "partner, earning $1730.76 per week."
        )


class TestMockEmbedder:
    def test_identical_strings_cosine_one(self):
        emb = MockEmbedder()
        V = emb.embed(["married couples share chores", "married couples share chores"])
        assert V[0] @ V[1] == pytest.approx(1.0, abs=1e-12)

    def test_disjoint_vocabulary_cosine_zero(self):
        emb = MockEmbedder()
        a = "alpha bravo charlie"
        b = "kilo lima mike"
        # fixture strings verified to share no hash buckets
        assert emb.token_buckets(a).isdisjoint(emb.token_buckets(b))
        V = emb.embed([a, b])
        assert V[0] @ V[1] == pytest.approx(0.0, abs=1e-12)

    def test_unit_norms(self):
        emb = MockEmbedder()
        texts = ["one two three", "four five", "six seven eight nine"]
        V = emb.embed(texts)
        np.testing.assert_allclose(np.linalg.norm(V, axis=1), 1.0, atol=1e-9)

    def test_empty_text_rejected(self):
        with pytest.raises(RagError):
            MockEmbedder().embed([""])

    def test_deterministic(self):
        emb = MockEmbedder()
        a = emb.embed(["spouse work leisure"])
        b = emb.embed(["spouse work leisure"])
        np.testing.assert_array_equal(a, b)


def random_kb(n, seed, vocab_size=400):
    rng = np.random.default_rng(seed)
    words = [f"w{int(i):03d}" for i in range(vocab_size)]
    kb = []
    for i in range(n):
        k = int(rng.integers(4, 12))
        text = " ".join(rng.choice(words, size=k))
        kb.append(KnowledgeInstance(id=f"doc-{i:04d}", topic="t", text=text))
    return kb


class TestRetrieve:
    def test_self_query_ranks_first(self):
        emb = MockEmbedder()
        kb = random_kb(40, seed=3)
        M = emb.embed([d.text for d in kb])
        res = retrieve_top_k(M[17], kb, M, k=3)
        assert res.instances[0].id == "doc-0017"
        assert res.similarities[0] == pytest.approx(1.0, abs=1e-9)

    def test_matches_brute_force_sort(self):
        emb = MockEmbedder()
        kb = random_kb(500, seed=7)
        M = emb.embed([d.text for d in kb])
        rng = np.random.default_rng(9)
        for _ in range(50):
            q = rng.normal(size=emb.dim)
            q /= np.linalg.norm(q)
            res = retrieve_top_k(q, kb, M, k=3)
            sims = M @ q
            brute = sorted(range(len(kb)), key=lambda i: (-sims[i], kb[i].id))[:3]
            assert [d.id for d in res.instances] == [kb[i].id for i in brute]
            assert not res.truncated

    def test_k_equals_kb_size_is_permutation(self):
        emb = MockEmbedder()
        kb = random_kb(12, seed=5)
        M = emb.embed([d.text for d in kb])
        res = retrieve_top_k(M[0], kb, M, k=12)
        assert sorted(d.id for d in res.instances) == sorted(d.id for d in kb)

    def test_small_kb_flagged(self):
        emb = MockEmbedder()
        kb = random_kb(2, seed=6)
        M = emb.embed([d.text for d in kb])
        res = retrieve_top_k(M[0], kb, M, k=3)
        assert res.truncated and len(res.instances) == 2

    def test_ties_break_by_id(self):
        emb = MockEmbedder()
        text = "identical content"
        kb = [
            KnowledgeInstance(id="doc-b", topic="t", text=text),
            KnowledgeInstance(id="doc-a", topic="t", text=text),
        ]
        M = emb.embed([d.text for d in kb])
        res = retrieve_top_k(M[0], kb, M, k=2)
        assert [d.id for d in res.instances] == ["doc-a", "doc-b"]

    def test_similarities_non_increasing(self):
        emb = MockEmbedder()
        kb = random_kb(100, seed=11)
        M = emb.embed([d.text for d in kb])
        res = retrieve_top_k(M[3], kb, M, k=10)
        sims = res.similarities
        assert all(a >= b - 1e-12 for a, b in zip(sims, sims[1:]))


class TestAugmentPrompt:
    def test_zero_instances_identity(self):
        _, user = render_prompt(MARRIED_PERSONA)
        assert augment_prompt(user, []) == user

    def test_instances_verbatim_in_rank_order(self):
        _, user = render_prompt(MARRIED_PERSONA)
        kb = random_kb(3, seed=2)
        out = augment_prompt(user, kb)
        positions = [out.find(d.text) for d in kb]
        assert all(p >= 0 for p in positions)
        assert positions == sorted(positions)
        assert out.index("Relevant research findings:") < positions[0]

    def test_golden_full_augmented_prompt(self):
        _, user = render_prompt(MARRIED_PERSONA)
        instances = [
            KnowledgeInstance(id="a", topic="t", text="Finding one."),
            KnowledgeInstance(id="b", topic="t", text="Finding two."),
        ]
        expected = (
            "You are a male, 53 years old, ethnically identified as Black. "
            "Your highest level of education is advanced degree, and your "
            "weekly income is $1173.00."
            "\n\nRelevant research findings:\n1. Finding one.\n2. Finding two.\n\n"
            "Based on this background, how would you allocate your time across "
            "Work, Leisure, Sleep and Personal Care, and Other in a typical day? "
            "Please answer in the format: [Work, Leisure, Sleep and Personal "
            "Care, Other], using numbers to indicate minutes."
        )
        assert augment_prompt(user, instances) == expected


class TestKnowledgeBase:
    def test_shipped_kbs_load(self):
        for topic in ("marriage", "race"):
            kb = load_kb(default_kb_path(topic))
            assert len(kb) >= 5
            assert all(inst.topic == topic for inst in kb)

    def test_duplicate_ids_rejected(self, tmp_path):
        path = tmp_path / "kb.json"
        path.write_text(
            '[{"id": "x", "topic": "t", "text": "a"}, {"id": "x", "topic": "t", "text": "b"}]'
        )
        with pytest.raises(RagError):
            load_kb(path)

    def test_empty_text_rejected(self, tmp_path):
        path = tmp_path / "kb.json"
        path.write_text('[{"id": "x", "topic": "t", "text": "  "}]')
        with pytest.raises(RagError):
            load_kb(path)


class TestMitigationLoop:
    def test_direction_of_change(self, dense_theta):
        """Conditioning the agent on retrieved findings must move the
        targeted feature's activity-vector cosine toward the human's."""
        pop = synth.generate_population(rich_config(600, 51))
        human_theta = dense_theta
        f = FEATURES.index("race_black")
        model_theta = dense_theta.copy()
        model_theta[:, f] = -dense_theta[:, f]  # reversed trade-offs for the target
        mitigated = model_theta.copy()
        mitigated[:, f] = 0.5 * (model_theta[:, f] + human_theta[:, f]) + 0.25 * human_theta[:, f]

        kb = load_kb(default_kb_path("race"))
        augment = make_augmenter(kb, MockEmbedder(), k=3)
        human_fit = fit_structural(synth.simulate_allocations(human_theta, pop))

        agent = MockAgent(model_theta, noise="none", seed=2, rag_theta=mitigated)
        pre, _ = run_batch(pop, agent)
        pre_fit = fit_structural(pre)
        post, _ = run_batch(pop, agent, augment=augment)
        post_fit = fit_structural(post)

        cos_pre = attribute_activity_cosine(human_fit, pre_fit, "race_black")
        cos_post = attribute_activity_cosine(human_fit, post_fit, "race_black")
        assert cos_pre < 0  # reversed trade-offs show up as negative alignment
        assert cos_post > cos_pre  # and retrieval-conditioning moves it up

    def test_rag_compare_table(self, dense_theta):
        from timealloc.rag import rag_compare_table

        h = dense_theta
        pre = dense_theta.copy()
        pre[:, 7] *= -1
        post = dense_theta.copy()
        from test_alignment import fit_from_theta

        table = rag_compare_table(
            fit_from_theta(h), fit_from_theta(pre), fit_from_theta(post),
            ["race_black", "spouse_present"],
        )
        assert list(table.columns) == ["feature", "cosine_pre", "cosine_post", "delta"]
        black = table.set_index("feature").loc["race_black"]
        assert black["cosine_pre"] == pytest.approx(-1.0)
        assert black["cosine_post"] == pytest.approx(1.0)
