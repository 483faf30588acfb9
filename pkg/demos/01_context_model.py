"""Building and evolving a context intersection.

A context intersection is a leveled DAG: grouping categories on the
first level, concrete categories underneath, values attached to nodes.
The only structural change allowed at run time is extension, so every
later configuration step contains the earlier one.
"""

from ctxflow import (
    Additions,
    ContextCategory,
    ContextIntersection,
    MasterContextModel,
    extend,
    instantiate_from_master,
    is_subgraph,
    relevant_subgraph,
    validate_intersection,
)

# the logistics master: three groupings, six leaf categories
g = ContextIntersection()
for cat_id in ("geospatial", "roles", "processObject"):
    g.add_category(ContextCategory(cat_id, cat_id), 1)
for cat_id, parent in (
    ("traffic", "geospatial"), ("weather", "geospatial"),
    ("customer", "roles"), ("freightForwarder", "roles"),
    ("orderedItems", "processObject"), ("itemDamage", "processObject"),
):
    g.add_category(ContextCategory(cat_id, cat_id), 2)
    g.add_edge(parent, cat_id)

report = validate_intersection(g)
print("master validates cleanly:", report.ok)

master = MasterContextModel("logistics", g, ["geospatial", "roles", "processObject"])
instance = instantiate_from_master(master, ["delivery-1"])
print("instance starts at step", instance.intersection.step,
      "with", len(instance.intersection.category_ids()), "categories")

# mid-execution the process learns its shipping and packaging method
growth = Additions(
    categories=[
        (ContextCategory("shippingMethod", "shipping method"), 2),
        (ContextCategory("packagingMethod", "packaging method"), 2),
    ],
    edges=[("processObject", "shippingMethod"),
           ("processObject", "packagingMethod")],
)
g_next = extend(instance.intersection, growth)
print("after extension: step", g_next.step,
      "| earlier is a subgraph of later:", is_subgraph(instance.intersection, g_next))

# a rule asking about the weather receives the hierarchy that gives it meaning
sub = relevant_subgraph(g_next, ["weather"])
print("relevant subgraph for {weather}:", sub.category_ids(), sub.edges)

# deletion is not an extension: moving a category to another level fails
try:
    extend(g_next, Additions(categories=[(ContextCategory("weather", "weather"), 1)]))
except Exception as err:
    print("relocation rejected:", type(err).__name__)
