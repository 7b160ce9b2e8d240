"""Smoke test for the compiled `sip_reward` extension.

Run after `pip install --no-build-isolation -e crates/python` (or with the
built library on PYTHONPATH):

    python crates/python/python/smoke_test.py
"""

import json
import math
import pathlib

import sip_reward

FIXTURES = pathlib.Path(__file__).resolve().parents[2] / "cli" / "tests" / "fixtures"


def load_instances():
    with open(FIXTURES / "dataset.jsonl", encoding="utf-8") as fh:
        return {rec["id"]: rec for rec in map(json.loads, filter(str.strip, fh))}


def main():
    assert sip_reward.repetition_reward(0.05) == 1.0
    assert math.isclose(sip_reward.repetition_reward(0.2), math.exp(-0.8))
    assert math.isclose(sip_reward.window_reward(1450.0), 1.0, abs_tol=1e-6)
    w = sip_reward.curriculum_weights(600)
    assert (w["w_out"], w["w_struct"], w["w_content"]) == (2.0, 2.0, 2.0)

    r = sip_reward.total_reward(format_ok=True, correct=True, r_struct=1.0, r_content=1.0, step=0)
    assert r["r_total"] == 4.0 and r["r_len"] is None
    try:
        sip_reward.total_reward(format_ok=True, correct=True, r_struct=1.5, r_content=1.0)
    except sip_reward.SipRewardError:
        pass
    else:
        raise AssertionError("out-of-range component was accepted")

    adv = sip_reward.group_advantages([1.0, 0.0, 1.0, 0.0])
    assert adv == [1.0, -1.0, 1.0, -1.0]
    assert sip_reward.group_advantages([0.5] * 5) == [0.0] * 5

    parsed = sip_reward.parse_trajectory("<think>\nOption B is tempting but option A fits.\n</think><answer>A</answer>")
    assert parsed["well_formed"] and parsed["answer_label"] == "A"
    assert sip_reward.repetition_ratio("a b c a b c a b c") > 0.5

    instances = load_instances()
    alex = instances["alex"]
    profile = sip_reward.count_option_mentions(alex, parsed["raw"])
    assert profile["total"] == sum(profile["per_quartile_counts"]) >= 1

    perturbed = sip_reward.perturb_instance(alex, [("A dog barked outside.", 1)])
    assert perturbed["id"] == "alex-perturbed"
    assert "A dog barked outside." in perturbed["story"]
    assert perturbed["options"] == alex["options"]

    seg = {"instance_id": "q", "trajectory_ref": "t", "acc": 1, "llm_score": 0.9,
           "source_step": 60, "length_tokens": 900}
    assert sip_reward.tier_assign(seg) == "A"
    weak = dict(seg, trajectory_ref="u", llm_score=0.3)
    pairs = sip_reward.build_pairs([seg, weak])
    assert [(p["priority"], p["chosen"]["trajectory_ref"]) for p in pairs] == [("P1", "t")]

    judge = sip_reward.Judge("mock", seed=3)
    grimmo = instances["grimmo"]
    verdict = judge.structural_score(grimmo, "Grimmo sees the sky and wonders what it is.")
    assert 0.0 <= verdict["score"] <= 1.0
    content = judge.content_score(grimmo, "Grimmo sees the sky and wonders what it is.")
    assert 0.0 <= content["score"] <= 1.0

    data = sip_reward.synthetic_dataset(6, options=4, seed=1)
    report = sip_reward.Judge("heuristic").train_toy(
        data, {"grpo": {"total_steps": 10, "batch_size": 3, "seed": 1}})
    assert len(report["metrics"]) == 10 and report["checkpoint"]["step"] == 10
    assert 0.0 <= report["train_accuracy"] <= 1.0

    print("sip_reward smoke test passed")


if __name__ == "__main__":
    main()
