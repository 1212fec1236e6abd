#!/usr/bin/env python3
"""Tour of the synthetic classification task.

Generates the desk-scale dataset, shows what a class template looks like
as ASCII art, trains one model centrally, and demonstrates what stamping
the plus trigger does to an image and to predictions.
"""

import numpy as np

from masafl.attacks import TrainConfig, benign_local_train
from masafl.data import gen_synthetic, plus_trigger, stamp_trigger
from masafl.nn import flatten, forward, init_model, unflatten

SHADES = " .:-=+*#%@"


def ascii_image(pixels):
    rows = []
    for row in pixels:
        rows.append("".join(SHADES[min(int(v * 10), 9)] for v in row))
    return "\n".join(rows)


def main():
    train = gen_synthetic(classes=8, per_class=200, image_shape=(10, 10), seed=0)
    test = gen_synthetic(classes=8, per_class=50, image_shape=(10, 10), seed=123)
    print(f"train: {len(train)} examples, {train.classes} classes, {train.image_shape} pixels")

    example = train[0]
    print(f"\nclass {example.label} example:")
    print(ascii_image(example.pixels))

    stamped = stamp_trigger(example, plus_trigger())
    print("\nsame image with the plus trigger stamped near the corner:")
    print(ascii_image(stamped.pixels))

    print("\ntraining a fresh 100->64->8 network for 5 epochs ...")
    model = init_model((100, 64, 8), seed=0)
    delta = benign_local_train(model, train, TrainConfig(epochs=5), seed=1)
    trained = unflatten(flatten(model) + delta, model.shape_signature)

    train_acc = (forward(trained, train).argmax(axis=1) == train.labels).mean()
    test_acc = (forward(trained, test).argmax(axis=1) == test.labels).mean()
    print(f"train accuracy {100 * train_acc:.1f}%, held-out accuracy {100 * test_acc:.1f}%")

    triggered = np.stack([stamp_trigger(test[i], plus_trigger()).pixels for i in range(20)])
    preds = forward(trained, triggered).argmax(axis=1)
    print(f"\na clean model ignores the trigger: {sum(p == test[i].label for i, p in enumerate(preds))}"
          f"/20 triggered images still classified correctly")


if __name__ == "__main__":
    main()
