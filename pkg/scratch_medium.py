import time

import numpy as np

from mdplan import dataset, denoiser, diffusion, guidance, invdyn, maze, planner, schedule

t0 = time.time()
episodes = maze.generate_dataset("medium-toy", 60_000, seed=0)
norm = dataset.fit_normalizer(episodes)
ns = diffusion.build_noise_schedule(20, "cosine")

schedules = {
    "uniform": schedule.uniform(12, 4),
    "dense-to-sparse": schedule.from_ranges([(4, 2), (3, 4), (4, 6)]),
    "sparse-to-dense": schedule.from_ranges([(4, 6), (3, 4), (4, 2)]),
}
env = maze.PointMaze(maze.load_layout("medium-toy"))

# random baseline
succ = 0
for s in range(100):
    rng = np.random.default_rng(s)
    state = env.reset(rng)
    for t in range(300):
        state, r, done = env.step(state, rng.uniform(-1, 1, 2))
        if done:
            succ += 1
            break
print(f"random: {succ}/100", flush=True)

for name, sched in schedules.items():
    t1 = time.time()
    cfg = denoiser.DenoiserConfig(model_dim=64, n_layers=4, n_heads=4, token_dim=4,
                                  max_offset=sched.total_span, max_diffusion_step=21)
    model = denoiser.init_denoiser(cfg, np.random.default_rng(0))
    rep = diffusion.train(model, episodes, sched, ns,
                          diffusion.TrainOptions(steps=2000, batch_size=64, lr=8e-4,
                                                 seed=1, normalizer=norm))
    val, _ = guidance.train_value(episodes, sched, norm,
                                  diffusion.TrainOptions(steps=600, batch_size=64, lr=1e-3, seed=2))
    gaps = set(sched.jumps)
    inv, _ = invdyn.train_invdyn(episodes, gaps, norm,
                                 diffusion.TrainOptions(steps=1500, batch_size=128, lr=1e-3, seed=3))
    models = planner.PlannerModels(denoiser=model, value=val, invdyn=inv, normalizer=norm,
                                   jump_schedule=sched, noise_schedule=ns)
    config = planner.PlannerConfig(n_candidates=8, max_episode_steps=300, goal_conditioning=True)
    results = [planner.run_episode(env, models, config, seed=s) for s in range(30)]
    succ = sum(r.success for r in results)
    print(f"{name}: loss {rep.smoothed()[1]:.3f}, success {succ}/30, "
          f"mean steps {np.mean([r.steps for r in results]):.0f}, "
          f"{time.time()-t1:.0f}s", flush=True)
print(f"total {time.time()-t0:.0f}s")
