import numpy as np
import pytest

from mdplan import dataset, denoiser, diffusion, guidance, invdyn, maze, planner, schedule


@pytest.fixture(scope="session")
def umaze_bundle():
    """A small trained model stack on umaze-toy, shared across test modules.

    Kept deliberately modest (about half a minute of training) — enough for
    closed-loop behavior to be meaningful, nowhere near convergence.
    """
    episodes = maze.generate_dataset("umaze-toy", 30_000, seed=0)
    norm = dataset.fit_normalizer(episodes)
    sched = schedule.uniform(6, 2)
    ns = diffusion.build_noise_schedule(20, "cosine")
    cfg = denoiser.DenoiserConfig(model_dim=64, n_layers=3, n_heads=4, token_dim=4,
                                  max_offset=sched.total_span, max_diffusion_step=21)
    model = denoiser.init_denoiser(cfg, np.random.default_rng(0))
    diffusion.train(model, episodes, sched, ns,
                    diffusion.TrainOptions(steps=1500, batch_size=64, lr=8e-4, seed=1,
                                           normalizer=norm))
    value, _ = guidance.train_value(episodes, sched, norm,
                                    diffusion.TrainOptions(steps=500, batch_size=64,
                                                           lr=1e-3, seed=2))
    inv, _ = invdyn.train_invdyn(episodes, {1, 2}, norm,
                                 diffusion.TrainOptions(steps=1200, batch_size=128,
                                                        lr=1e-3, seed=3))
    models = planner.PlannerModels(denoiser=model, value=value, invdyn=inv,
                                   normalizer=norm, jump_schedule=sched, noise_schedule=ns)
    return {"episodes": episodes, "models": models}
