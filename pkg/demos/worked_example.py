"""Which group each role lands in as measured congestion rises.

Uses the packaged four-group configuration and role weights.

    python demos/worked_example.py
"""

from lodsync.harness import data_path
from lodsync.organization import load_organization, score_coefficient

org = load_organization(data_path("roles.txt"), data_path("groups.txt"))
names = {g.group_id: g.name for g in org.groups}
roles = sorted(org.roles.values(), key=lambda r: r.weight)

print("loss %".ljust(8) + "".join(r.name.ljust(15) for r in roles))
for congestion in (0, 2, 5, 10, 15, 20, 50, 80):
    cells = []
    for r in roles:
        gid = org.group_for_role(r.name, congestion)
        cells.append(f"{names[gid]}({score_coefficient(r.weight, congestion):g})".ljust(15))
    print(f"{congestion:<8}" + "".join(cells))
