"""How retrieved answers guide a response.

Builds a small restaurant corpus, indexes its (question, answer) pairs and
shows what the retriever hands to the model for one query at several
thresholds, including which retrieved tokens stay copyable once entity words
are masked.

    python demos/retrieval_guidance.py
"""

from thpn.corpus import SyntheticConfig, extract_qa_pairs, generate_synthetic
from thpn.retrieval import RetrievalConfig, build_repository, retrieve
from thpn.training import training_entities

dialogues = generate_synthetic(SyntheticConfig(n_dialogues=200, task_style="full", seed=1))
train, held_out = dialogues[:180], dialogues[180:]
entities = training_entities(train)

for method in ("cosine", "bm25"):
    repo = build_repository(extract_qa_pairs(train), method)
    print(f"== {method} repository: {len(repo)} question/answer pairs")

    # a lookup question from a dialogue the repository has never seen
    dialogue = held_out[0]
    names = {k.subject for k in dialogue.kb}
    turn = next(t for t in dialogue.turns if names & set(t.user))
    print("query:", " ".join(turn.user))
    print("gold :", " ".join(turn.system))

    for theta in (0.3, 0.6, 1.0):
        found = retrieve(turn.user, repo, RetrievalConfig(theta=theta, method=method),
                         kb=dialogue.kb, extra_entities=entities)
        print(f"  theta={theta:.1f}: {len(found.answers)} answer(s)")
        for answer, score in found.answers:
            print(f"    {score:.3f}  {' '.join(answer)}")

    # copyable pattern words vs masked entity words in the flattened sequence
    marked = [tok if ok else f"[{tok}]" for tok, ok in
              zip((it.emit_token for it in found.flat_items[:-1]), found.r_r)]
    print("  copyable (masked in brackets):", " ".join(marked))
    print()
