"""
Training the learned similarity on a toy scene
==============================================

The encoder is trained so that the pose gradient of its similarity points the
same way as the gradient of the geodesic distance to the true pose.  A short
run already shows the gradient-direction loss falling.
"""
import numpy as np

from prost.learned_similarity import TrainConfig, evaluate_alignment, init_params, moving_average, train

cfg = TrainConfig(iterations=300)
before = evaluate_alignment(init_params(cfg.init_seed), cfg, n_poses=20)


def progress(step, mdist, lr):
    if step % 50 == 0:
        print(f"step {step:4d}  mdist {mdist:.3f}  lr {lr:.2e}")


res = train(cfg, callback=progress)
M = np.array([m for _, m, _ in res.history])
ma = moving_average(M, 50)
print("moving average at step 50:", round(ma[49], 3), " at the end:", round(ma[-1], 3))

after = evaluate_alignment(res.params, cfg, n_poses=20)
print("translation cosine before", round(before["cos_trans"], 3), "after", round(after["cos_trans"], 3))
