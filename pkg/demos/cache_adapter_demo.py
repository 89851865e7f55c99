"""Training-free boost from a key-value cache over the few-shot features.

Starting from the fine-tuned pooling layer of a few-shot episode, the
script builds a cache whose keys are the blended pooled features of the
training shots and whose values are their one-hot labels, tunes the
adapter's two scalars on the validation shots, and compares test accuracy
with and without the cache term.
"""

import pathlib
import tempfile

import numpy as np

from safepool import (Classifier, FewShotData, TrainConfig, build_cache,
                      evaluate, gen_synthetic, safe_a_logits_batch,
                      sample_k_shot, train_safe, tune_cache_hparams)

root = pathlib.Path(tempfile.mkdtemp(prefix="cache_"))
manifest = gen_synthetic(root, n_classes=6, pool_per_class=10, height=5,
                         width=5, channels=32, embed_dim=16, parts=12,
                         noise=0.7, seed=5, test_per_class=10,
                         classifier_noise=0.9)
clf = Classifier(manifest.load_classifier_weights())
frozen = manifest.load_attnpool()
test_maps, test_labels, _ = manifest.load_split("test")

episode = FewShotData.from_manifest(manifest, sample_k_shot(manifest, 4, 1))
# A deliberately short fine-tuning budget: the cache adapter is most
# useful when gradient adaptation has not fully converged.
cfg = TrainConfig(iterations=200, eval_every=100, seed=1)
tuned = train_safe(episode, frozen, clf, cfg).best_params

plain = evaluate(test_maps, test_labels, frozen, tuned, clf, beta=cfg.beta)
print(f"fine-tuned test accuracy (no cache): {plain.accuracy:.3f}")

# Keys through the deployed blend path, one-hot values.
cache = build_cache(episode.train_maps, episode.train_labels, "blended",
                    frozen, tuned, beta=cfg.beta)
print(f"cache: {cache.keys.shape[0]} keys of dim {cache.keys.shape[1]}")

# Pick alpha (cache weight) and gamma (affinity sharpness) on validation.
alpha, gamma, val_acc = tune_cache_hparams(
    episode.val_maps, episode.val_labels, frozen, tuned, cfg.beta,
    cache, clf)
cache.alpha, cache.gamma = alpha, gamma
print(f"tuned alpha={alpha:g}, gamma={gamma:g} "
      f"(validation accuracy {val_acc:.3f})")

logits = safe_a_logits_batch(test_maps, frozen, tuned, cfg.beta, cache, clf)
acc = float(np.mean(np.argmax(logits, axis=1) == test_labels))
print(f"cache-augmented test accuracy:       {acc:.3f} "
      f"({(acc - plain.accuracy) * 100:+.1f} points)")
