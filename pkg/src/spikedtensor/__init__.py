"""Numerics for the multi-spiked symmetric tensor model."""

from .tensors import (MAX_ORDER, MIN_ORDER, SpikeModel, StorageError, SymTensor,
                      build_spiked, correlated_unit_vectors, load_tensor,
                      multiset_size, noise_variance, sample_noise, save_tensor)
from .critical import (CriticalPoint, SingularGramError, SolveReport, SummaryStats,
                       ZeroWeightError, critical_point_record, find_critical_points,
                       flatten, gram, hadamard_power, iterate_once, kkt_residual,
                       load_critical_point, save_critical_point, stats_from_critical,
                       summary_statistics, symmetrized_flatten, weight_matrix)
from .spectrum import (SpectralLimit, density_grid, empirical_spectrum,
                       fixed_point_residual, g1, kappa_rank2, kappa_spectrum,
                       ks_distance, limit_cdf, limit_density,
                       noise_flattening_stats, scale_factor,
                       spectral_limit_from_stats, stieltjes_matrix,
                       stieltjes_matrix_edge, write_density_csv,
                       write_eigenvalues_txt)
from .alignments import (AlignmentSolution, HypothesisViolationError,
                         alignment_residual, asymptotic_squared_error,
                         detection_threshold, gamma_validity_bound,
                         rank1_gamma_bound, select_solution,
                         solve_alignment_system)
from .inference import (CriticalPointNonconvergence, EstimationResult,
                        PluginEstimate, PluginMatrices,
                        UninformativeCriticalPointError, appendix_polynomial,
                        estimate_from_tensor, plugin_matrices, plugin_residual,
                        select_estimate, solve_plugin_general, solve_plugin_rank1,
                        solve_plugin_rank2)

__version__ = "0.1.0"
