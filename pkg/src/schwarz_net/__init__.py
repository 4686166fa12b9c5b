"""Overlapping-subdomain solvers for graph-structured positive-definite systems."""

from .admm import AdmmState, admm_solve, build_lifted
from .asynchronous import DelaySchedule, PublicBoard, async_solve_sim, async_solve_threaded, epoch_index
from .constrained import ConstrainedProblem, constrained_subsolve, constrained_sync_solve, solve_soft_problem
from .errors import (BandwidthError, DivergenceError, InputError, NotCertifiableError,
                     NotPositiveDefiniteError, ScheduleExhaustedError, SchwarzError, SolverTimeout)
from .graph import (Graph, OverlapBlocks, Partition, all_pairs_distance, bfs_distance, expand_overlap,
                    format_stats_table, greedy_partition, partition_stats)
from .matrix import (StructuredMatrix, SubdomainSystem, bandwidth, check_bandwidth_algebra,
                     project_subdomain, residual_inf, structure_ratio)
from .problems import (EstimationProblem, GraphQPSpec, build_estimation_system, estimation_instance,
                       generate_network, reduce_graph_qp, simulate_measurements)
from .spectral import (EigenInterval, RateBound, SpectralDisk, build_iteration_matrices, disk_for,
                       eigen_interval, inverse_decay_bound, inverse_decay_matrix, rate_bound,
                       theorem4_check)
from .sync import (IterationState, SubproblemBackend, fit_linear_tail, sync_solve,
                   verify_linear_rate)

__version__ = "0.1.0"
