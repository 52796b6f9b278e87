# %% [markdown]
# # Flows on a title prefix tree
#
# Three titles, their counts, and the tree they induce. Each node's flow is
# the total count of titles below it, so following flow ratios from the root
# samples titles in proportion to their counts.

# %%
import math

from flowtune.catalog import catalog_from_frequencies
from flowtune.flownet import END, build_prefix_tree, path_log_reward, process_reward
from flowtune.policy import flow_optimal_params, init_params, item_log_probs, sample_titles

catalog = catalog_from_frequencies(
    {"f": "Back to the Future", "l": "Back to Life", "j": "Jaws"}, {"f": 6, "l": 2, "j": 4}
)
tree = build_prefix_tree(catalog)
for path, flow in tree.rows():
    print(f"{' / '.join(path) or '<root>':<35} {flow:5.0f}")

# %% [markdown]
# Process rewards are child-to-parent flow ratios. Their product along a path
# is the item's share of the total.

# %%
back_to = tree.root.children["Back"].children["to"]
print("R_p(Back to -> the) =", process_reward(tree, back_to, "the"))
for item in catalog.item_ids:
    print(item, math.exp(path_log_reward(tree, item)), catalog.items[item].frequency / tree.Z)

# %% [markdown]
# A uniform policy over next tokens spreads mass by tree shape; the
# flow-matched policy reproduces the counts exactly.

# %%
for name, params in [("uniform", init_params(tree)), ("flow-matched", flow_optimal_params(tree))]:
    probs = {i: round(math.exp(v), 4) for i, v in item_log_probs(tree, params).items()}
    print(f"{name:>13}: {probs}")

draws = sample_titles(tree, None, flow_optimal_params(tree), 12_000, rng=0)
print("empirical:", {i: round(draws.count(i) / len(draws), 3) for i in catalog.item_ids})
print("leaves are END markers:", all(tree.nodes[tree.leaf_of[i]].token is END for i in catalog.item_ids))
