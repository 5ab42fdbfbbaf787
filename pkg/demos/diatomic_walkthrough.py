# From a toy potential to a force field
#
# A harmonic diatomic (k = 10 eV/A^2 at kT = 0.1 eV, so the bond length moves
# by about 0.1 A) is small enough to train in well under a minute.  We pretrain
# with anisotropic denoising, fine-tune on forces, and then ask the generator
# which directions it learned to keep quiet.

# %%
import time

import numpy as np

from anids import analysis, moldata, trainer
from anids.trainer import TrainConfig

pot = moldata.harmonic_diatomic()
frames = moldata.sample_boltzmann(pot, 400, temperature=0.1, seed=0)
train_frames, val_frames = frames[:320], frames[320:]
lengths = [np.linalg.norm(f.positions[1] - f.positions[0]) for f in frames]
print(f"{len(frames)} frames, bond length {np.mean(lengths):.3f} +- {np.std(lengths):.3f} A")

# %% [markdown]
# Pretraining: the denoiser predicts the anisotropic score target while the
# generator balances the KL pull toward isotropic noise against the hinge on
# its anisotropic mass.

# %%
cfg = TrainConfig()
run = trainer.new_run(cfg, train_frames)
t0 = time.perf_counter()
run = trainer.train(run, 300, supervised=False)
print(f"pretrain: 300 steps in {time.perf_counter() - t0:.1f}s")
print("first / last log rows:")
print(np.array(run.log)[[0, -1]])

# %% [markdown]
# Supervised training reuses the pretrained weights.  A quarter of the frames
# get anisotropic corruption as an auxiliary task.

# %%
run = trainer.new_run(cfg, train_frames, params=run.params)
t0 = time.perf_counter()
run = trainer.train(run, 2000, supervised=True)
print(f"train: 2000 steps in {time.perf_counter() - t0:.1f}s")
print("held-out force metrics:", trainer.force_metrics(run.params, cfg, val_frames))

# %% [markdown]
# Probe the generator at the reference geometry.  The smallest eigenvalue
# should sit along the bond, the direction where displacements cost energy.

# %%
ref = moldata.Molecule(pot.atomic_numbers, pot.reference)
report = analysis.probe(run.params, cfg.encoder, ref, pot, sigma_p=cfg.sigma_p)
for atom in report.atoms:
    print(f"atom {atom.index}: eigenvalues {np.round(atom.eigenvalues, 5)}  "
          f"|cos(v_min, bond)| {atom.bond_alignment:.3f}")
print("Spearman rho (eigenvalue vs energy sensitivity):", report.spearman())
