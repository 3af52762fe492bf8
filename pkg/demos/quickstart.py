"""Train a small model for a few hundred steps, then use it three ways.

1. retrieval: embed held-out images and captions, report Precision@1
2. native generation: answer a question with the full prompt in the cache
3. compressed generation: same question after the image is pruned from the
   KV cache, keeping only the system prefix and the chorus tokens

Takes about a minute on one CPU core.
"""
import logging

from chorus import (DatasetSpec, GenerationConfig, ModelConfig, TrainConfig, build_dataset, evaluate,
                    generate_compressed, generate_native, train)


def main() -> None:
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    ds = build_dataset(DatasetSpec(n_train=800, n_eval=100, n_hetero=200, candidate_pool_size=50))
    cfg = TrainConfig(model=ModelConfig(k_chorus=8), steps=300, warmup_steps=30, log_every=50)
    params, _ = train(cfg, ds, seed=0)

    report = evaluate(params, ds, n_queries=50, n_qa=40)
    print(f"P@1 {report.precision_at_1:.2f}  native acc {report.native_accuracy:.2f}  "
          f"compressed acc {report.compressed_accuracy:.2f}")

    sample = ds.eval[0].qa_sample()
    question, gold = sample.g_inst, sample.answer
    gen = GenerationConfig(max_new_tokens=4)
    native = generate_native(params, sample, gen)
    compressed = generate_compressed(params, sample, gen)
    print(f"Q: {question}  gold: {gold}")
    print(f"native:     {native.text()!r}  (cache {native.stats.n_full} entries)")
    print(f"compressed: {compressed.text()!r}  (kept {compressed.stats.retained} of "
          f"{compressed.stats.n_full}, ratio {compressed.stats.ratio:.2f}%)")


if __name__ == "__main__":
    main()
