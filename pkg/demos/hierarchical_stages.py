"""
Two stages instead of one
=========================

Reduce 10-D data on a 2-D manifold first to 4 dimensions, freeze that
flow, then fit a second flow on the 4-D projections.  The comparison is
against a single 10 -> 2 flow with the same total number of epochs, using
the density of each point's projection on the learned manifold.
"""

from mflow import metrics
from mflow.checkpoint import dumps
from mflow.data import make_embedded_gaussian, train_heldout_split
from mflow.objective import LossConfig
from mflow.training import FlowSpec, Stage, StagePlan, build_model, train_hierarchical, train_single_step

data = make_embedded_gaussian(3000, d=2, D=10, seed=0, noise_sigma=0.01)
train, held = train_heldout_split(data, seed=0)
epochs = 20

single = build_model(FlowSpec(), 10, 2, seed=0)
train_single_step(single, train, LossConfig(), epochs, seed=0)

###############################################################################
# The hook runs after each stage, before the next one starts.  Stage 1's
# serialized form must not change while stage 2 trains.
frozen = {}
plan = StagePlan([Stage(manifold_dim=4, epochs=epochs // 2), Stage(manifold_dim=2, epochs=epochs // 2)])
models, reports = train_hierarchical(plan, train, seed=0,
                                     on_stage_done=lambda k, m, r: frozen.setdefault(k, dumps(m)))
print("stage 1 untouched by stage 2:", frozen[1] == dumps(models[0]))

print("manifold nll, single-step :", round(metrics.manifold_nll(single, held), 3))
print("manifold nll, hierarchical:", round(metrics.manifold_nll(models, held), 3))
