"""Train a small model and look at where each output token came from.

Every generated token is tagged with its source: plain for the vocabulary,
``[r]`` when copied from a retrieved answer, ``[h]`` when copied from the
dialogue history or KB. Runs in about a minute on one core.

    python demos/train_and_inspect.py
"""

import logging

from thpn.corpus import SyntheticConfig, generate_synthetic
from thpn.model import Hyperparams
from thpn.training import (build_training_repository, evaluate, prepare_examples, train,
                           training_entities, vocab_for)

logging.basicConfig(level=logging.INFO, format="%(message)s")

dialogues = generate_synthetic(SyntheticConfig(n_dialogues=150, task_style="kb_lookup", seed=3))
train_d, valid_d, test_d = dialogues[:120], dialogues[120:135], dialogues[135:]

hp = Hyperparams(d=48, epochs=5, lr=1e-3, theta=0.8, seed=0)
repo = build_training_repository(train_d)
entities = training_entities(train_d)
train_ex = prepare_examples(train_d, repo, hp, entities, exclude_self=True)
valid_ex = prepare_examples(valid_d, repo, hp, entities)
test_ex = prepare_examples(test_d, repo, hp, entities)

result = train(train_ex, vocab_for(train_d), hp, valid_ex)
report, predictions = evaluate(result.model, test_ex, entities)
print(f"\nbest epoch {result.best_epoch}: accuracy {report.per_response_accuracy:.3f}, "
      f"BLEU {100 * report.bleu:.1f}, entity F1 {report.entity_f1:.3f}\n")

tag = {"vocab": "", "retrieved": "[r]", "history": "[h]"}
for pred in predictions[:8]:
    ex = pred.example
    last_turn = max(it.turn_index for it in ex.context.items if it.speaker_tag == "user")
    print("user :", " ".join(it.emit_token for it in ex.context.items
                             if it.speaker_tag == "user" and it.turn_index == last_turn))
    print("guide:", " | ".join(" ".join(a) for a, _ in ex.retrieved.answers))
    print("gold :", " ".join(ex.gold))
    print("model:", " ".join(tok + tag[p.source] for tok, p in zip(pred.tokens, pred.provenance)))
    print()
