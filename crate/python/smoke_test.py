"""Exercise the Python bindings end to end on a small synthetic corpus."""

import json
import math

import sentinel_py as sp


def main():
    assert sp.tokenize("Hello, World!") == ["Hello", ",", "World", "!"]

    dense = sp.generate_topology("chain", 4)
    assert len(dense) == 4 and all(len(row) == 4 for row in dense)

    train = sp.generate_corpus(n_graphs=8, n_agents=6, seed=3, id_prefix="train")
    assert len(train) == 8 and len(train[0]) == 6
    assert sp.DialogueGraph.from_json(train[0].to_json()).to_json() == train[0].to_json()

    emb = sp.Embedder("hashing", dim=16, seed=0)
    assert len(emb.embed_sentence("a quick check")) == 16
    assert len(emb.embed_tokens(["a", "b", "c"])) == 3

    params, losses = sp.train(train, embedder=emb, epochs=2, batch_size=4, seed=1)
    assert params.dim == 16 and len(losses) == 2 and all(math.isfinite(x) for x in losses)
    assert sp.ModelParams.from_json(params.to_json()) == params

    target = sp.generate_corpus(n_graphs=1, n_agents=6, seed=9, id_prefix="test")[0]
    attacked = sp.inject_attack(target, [1, 4], seed=2)
    assert attacked.labels == [i in (1, 4) for i in range(6)]

    report = sp.detect(attacked, params, embedder=emb, budget=2)
    assert len(report.flagged) == 2 and len(report.fused) == 6
    assert json.loads(report.to_json())["graph_id"] == attacked.graph_id
    assert "<" in report.render("html")

    rounds = sp.propagate(attacked, set(report.flagged), rounds=2, p_infect=0.5, seed=0)
    assert len(rounds) == 3

    assert sp.auroc([0.1, 0.9, 0.2], [False, True, False]) == 1.0

    try:
        sp.detect(attacked, sp.ModelParams.zeros(8), embedder=emb)
    except sp.SentinelError as err:
        assert "dim" in str(err)
    else:
        raise AssertionError("dimension mismatch not raised")

    config = json.dumps({"embedder": {"kind": "hashing", "dim": 16, "seed": 0}, "budget": 2})
    summary = sp.evaluate([attacked], params, config)
    assert isinstance(summary, dict) and 0.0 <= summary["auroc"] <= 1.0

    print("smoke test ok")


if __name__ == "__main__":
    main()
