import numpy as np
import pytest
import torch

from fulltarget.data import ImageDataset
from fulltarget.training import TrainConfig, accuracy, compute_centroids, latents, train_classifier


def streaming_centroids(model, ds):
    """Welford-style running mean per class, one sample at a time."""
    means, counts = {}, {}
    with torch.no_grad():
        for x, y in zip(ds.images, ds.labels):
            z = model.extract(torch.from_numpy(x)[None])[0].double().numpy()
            k = int(y)
            counts[k] = counts.get(k, 0) + 1
            if k not in means:
                means[k] = z.copy()
            else:
                means[k] += (z - means[k]) / counts[k]
    return np.stack([means[k] for k in range(ds.num_classes)])


def test_training_learns_and_freezes(tiny_data):
    hist = []
    m = train_classifier(tiny_data, "plain_cnn", TrainConfig(lr=0.01, epochs=10, batch_size=16), history=hist)
    assert m.frozen
    assert len(hist) == 10 and hist[-1]["loss"] < hist[0]["loss"]
    assert m.train_accuracy == accuracy(m, tiny_data)
    assert m.train_accuracy > 0.5


def test_training_is_deterministic(tiny_data):
    cfg = TrainConfig(lr=0.01, epochs=1, batch_size=32, seed=3)
    a = train_classifier(tiny_data, "res_cnn", cfg)
    b = train_classifier(tiny_data, "res_cnn", cfg)
    for pa, pb in zip(a.state_dict().values(), b.state_dict().values()):
        assert torch.equal(pa, pb)


def test_centroids_match_streaming_oracle(tiny_data):
    m = train_classifier(tiny_data, "plain_cnn", TrainConfig(lr=0.01, epochs=1, batch_size=32))
    c = compute_centroids(m, tiny_data, batch_size=7)
    np.testing.assert_allclose(c.centroids.numpy(), streaming_centroids(m, tiny_data), atol=1e-5)
    assert c.num_classes == 4 and c[2].shape == (m.latent_dim,)


def test_centroids_require_eval_and_all_classes(tiny_data):
    m = train_classifier(tiny_data, "plain_cnn", TrainConfig(epochs=0))
    m.train()
    with pytest.raises(ValueError, match="frozen"):
        compute_centroids(m, tiny_data)
    m.eval()
    missing = ImageDataset(tiny_data.images[tiny_data.labels != 2], tiny_data.labels[tiny_data.labels != 2], 4)
    with pytest.raises(ValueError, match="class 2"):
        compute_centroids(m, missing)


def test_latents_batched_equal_unbatched(tiny_data):
    m = train_classifier(tiny_data, "res_cnn", TrainConfig(epochs=0))
    torch.testing.assert_close(latents(m, tiny_data.images, 5), latents(m, tiny_data.images, 1000))


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(lr=0)
    with pytest.raises(ValueError):
        TrainConfig(optimizer="rmsprop")
