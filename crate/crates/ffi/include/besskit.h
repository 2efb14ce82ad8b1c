#ifndef BESSKIT_H
#define BESSKIT_H

/* Generated by cbindgen from the besskit-ffi crate; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result of any fallible call.
typedef enum BesskitStatus {
  BESSKIT_STATUS_OK = 0,
  BESSKIT_STATUS_NULL_POINTER = 1,
  BESSKIT_STATUS_INVALID_INPUT = 2,
  BESSKIT_STATUS_INFEASIBLE = 3,
  BESSKIT_STATUS_DOMAIN = 4,
  BESSKIT_STATUS_BUDGET = 5,
  BESSKIT_STATUS_GAP = 6,
  BESSKIT_STATUS_IO = 7,
  BESSKIT_STATUS_PARSE = 8,
  BESSKIT_STATUS_PANIC = 9,
} BesskitStatus;

// Dispatch objective variant.
typedef enum BesskitMode {
  BESSKIT_MODE_ENERGY_ONLY = 0,
  BESSKIT_MODE_JOINT = 1,
} BesskitMode;

// Which hourly series of a schedule to copy out.
typedef enum BesskitSeries {
  // Energy-market charge power per hour (MW).
  BESSKIT_SERIES_POWER_CHARGE = 0,
  // Energy-market discharge power per hour (MW).
  BESSKIT_SERIES_POWER_DISCHARGE = 1,
  // Regulation capacity per hour (MW).
  BESSKIT_SERIES_POWER_REGULATION = 2,
  // State of charge as a fraction of capacity after each hour, including
  // the initial state, so the buffer needs horizon + 1 slots.
  BESSKIT_SERIES_SOC = 3,
} BesskitSeries;

// Opaque one-horizon dispatch problem.
typedef struct BesskitProblem BesskitProblem;

// Opaque solved schedule.
typedef struct BesskitSchedule BesskitSchedule;

// Opaque battery parameter set.
typedef struct BesskitSpec BesskitSpec;

// Revenue components of a solved schedule, in dollars.
typedef struct BesskitBreakdown {
  double credit_energy;
  double credit_capability;
  double credit_performance;
  double cost_degradation;
  double net;
} BesskitBreakdown;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Static description of a status code. Never null; do not free.
const char *besskit_status_message(enum BesskitStatus status);

// Battery parameters from the reference configuration (10 MW / 10 MWh,
// 95% one-way efficiencies). Free with `besskit_spec_free`.
struct BesskitSpec *besskit_spec_default(void);

// Builds a validated parameter set.
//
// # Safety
// `out` must be a valid pointer; on success it receives an owned handle.
enum BesskitStatus besskit_spec_new(double p_max_mw,
                                    double e_max_mwh,
                                    double eta_charge,
                                    double eta_discharge,
                                    double deg_speed,
                                    double storage_cost_per_mwh,
                                    double soc_end_of_life,
                                    double initial_soc,
                                    double performance_score,
                                    struct BesskitSpec **out);

// Releases a spec handle. Null is a no-op.
//
// # Safety
// `spec` must be a handle from this library, freed at most once.
void besskit_spec_free(struct BesskitSpec *spec);

// Degradation cost per MWh of throughput implied by the spec.
//
// # Safety
// `spec` and `out` must be valid pointers.
enum BesskitStatus besskit_spec_degradation_rate(const struct BesskitSpec *spec, double *out);

// Builds a dispatch problem over `horizon` hours.
//
// `lmp` is required with `horizon` entries. The five regulation series may
// each be null, which means all zeros (an energy-only market).
//
// # Safety
// Non-null array pointers must reference `horizon` readable doubles; `spec`
// and `out` must be valid.
enum BesskitStatus besskit_problem_new(const struct BesskitSpec *spec,
                                       size_t horizon,
                                       const double *lmp,
                                       const double *rmccp,
                                       const double *rmpcp,
                                       const double *beta,
                                       const double *regd_up,
                                       const double *regd_down,
                                       struct BesskitProblem **out);

// Releases a problem handle. Null is a no-op.
//
// # Safety
// `problem` must be a handle from this library, freed at most once.
void besskit_problem_free(struct BesskitProblem *problem);

// Solves a problem on the given SOC/power grid. The steps must divide the
// spec's energy and power capacities evenly.
//
// # Safety
// `problem` and `out` must be valid pointers.
enum BesskitStatus besskit_solve(const struct BesskitProblem *problem,
                                 double soc_step_mwh,
                                 double power_step_mw,
                                 enum BesskitMode mode,
                                 struct BesskitSchedule **out);

// Releases a schedule handle. Null is a no-op.
//
// # Safety
// `schedule` must be a handle from this library, freed at most once.
void besskit_schedule_free(struct BesskitSchedule *schedule);

// Number of hours in the schedule; 0 for a null handle.
//
// # Safety
// `schedule` must be null or a valid handle.
size_t besskit_schedule_horizon(const struct BesskitSchedule *schedule);

// Copies the revenue breakdown of a solved schedule.
//
// # Safety
// `schedule` and `out` must be valid pointers.
enum BesskitStatus besskit_schedule_breakdown(const struct BesskitSchedule *schedule,
                                              struct BesskitBreakdown *out);

// Copies one series of the schedule into `buf`. `len` must equal the
// horizon, except for `BESSKIT_SERIES_SOC` which needs horizon + 1.
//
// # Safety
// `schedule` must be valid and `buf` writable for `len` doubles.
enum BesskitStatus besskit_schedule_series(const struct BesskitSchedule *schedule,
                                           enum BesskitSeries series,
                                           double *buf,
                                           size_t len);

// Great-circle distance in miles between two (lat, lon) points in degrees.
//
// # Safety
// `out` must be a valid pointer.
enum BesskitStatus besskit_haversine_miles(double lat1,
                                           double lon1,
                                           double lat2,
                                           double lon2,
                                           double *out);

// Selects `n_select` of `n` nodes maximizing total sigma subject to a
// per-cluster cap and a minimum pairwise distance, exactly.
//
// `distance` is row-major `n * n`, symmetric with a zero diagonal.
// `out_indices` receives the selected node indices in ascending order (ties
// on the objective resolve toward lower indices) and must have room for
// `n_select` entries.
//
// # Safety
// `sigma` and `cluster` must reference `n` readable elements, `distance`
// `n * n`; `out_indices` must be writable for `n_select` entries and
// `out_objective` for one double.
enum BesskitStatus besskit_place(size_t n,
                                 const double *sigma,
                                 const uint32_t *cluster,
                                 const double *distance,
                                 size_t n_select,
                                 size_t max_per_cluster,
                                 double min_distance_miles,
                                 size_t *out_indices,
                                 double *out_objective);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* BESSKIT_H */
