"""Compare DRAM-traffic schedules for the expansion and fold trees.

The analytical model counts bytes moved between off-chip memory and a
fixed-size on-chip buffer for each traversal policy.  Hybrid traversal with
reduction overlap (HS_DFS_RO) cuts tree traffic sharply versus plain BFS.

Run:  python3 demos/03_traffic_model.py
"""

from pirlib.params import table1_params
from pirlib.sched import (MemModel, SchedulePolicy, STRATEGIES, build_graphs,
                          pipeline_reports, report, simulate_traffic)


def main():
    params = table1_params(z=2**22, ell=5, d=11)
    capacity = (160 << 20) // 32  # 160MB shared by a batch of 32
    mem = MemModel(capacity, params)
    print(f"grid {params.rows} x {params.D0}, on-chip {capacity >> 20}MB "
          f"per query\n")

    expand, coltor, _ = build_graphs(params)
    for graph in (expand, coltor):
        bfs = simulate_traffic(graph, SchedulePolicy("BFS"), mem)
        best = simulate_traffic(graph, SchedulePolicy("HS_DFS_RO"), mem)
        print(f"{graph.stage}: BFS {bfs.total_bytes / 1e9:.2f}GB, "
              f"HS_DFS_RO {best.total_bytes / 1e9:.2f}GB "
              f"({bfs.total_bytes / best.total_bytes:.2f}x less traffic)")

    print("\nfull pipeline, every policy:")
    reports = []
    for name in STRATEGIES:
        reports.extend(pipeline_reports(params, SchedulePolicy(name), mem))
    print(report(reports))


if __name__ == "__main__":
    main()
