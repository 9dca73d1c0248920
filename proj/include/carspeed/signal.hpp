#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "carspeed/dataset.hpp"

namespace carspeed {

/// Raised when a whole session cannot be used (e.g. the GPS never locks).
class SessionRejected : public std::runtime_error {
public:
    explicit SessionRejected(const std::string& m) : std::runtime_error(m) {}
};

struct PipelineConfig {
    double imu_rate_hz = 500.0;
    int decim_factor = 25;  // 500 Hz -> 20 Hz
    double cutoff_hz = 8.0;
    double gdop_max = 5.0;
    double label_tolerance_s = 0.025;  // half a 20 Hz period
    double gap_split_s = 0.1;          // larger sample gaps split the session

    double out_rate_hz() const { return imu_rate_hz / decim_factor; }
};

// CSV ingestion. IMU header `t,ax,ay,az`, GPS header `t,speed,gdop`;
// timestamps must be strictly increasing. Errors name the offending row.
ImuSession parse_imu_csv(const std::string& path);
GpsTrack parse_gps_csv(const std::string& path);

/// Drop everything recorded before the first GPS point whose GDOP reaches
/// the threshold, and re-zero both clocks to that instant. A session whose
/// GPS never locks is rejected.
struct GatedPair {
    GpsTrack track;
    ImuSession imu;
};
GatedPair gate_gdop(const GpsTrack& track, const ImuSession& imu, double threshold);

/// Zero-phase second-order Butterworth low-pass: the biquad is applied
/// forward then backward, with steady-state initialization so a constant
/// signal passes through unchanged. Requires 0 < cutoff < fs/2.
std::vector<double> lowpass(const std::vector<double>& x, double fs_hz, double cutoff_hz);

/// Keep every factor-th element starting at index 0.
std::vector<double> decimate(const std::vector<double>& x, int factor);

/// IMU samples snapped to the nominal-rate grid; gaps longer than
/// `gap_split_s` split the session into independent segments.
struct ImuSegment {
    std::string segment_id;
    std::vector<ImuSample> samples;  // timestamps on the exact grid
};
std::vector<ImuSegment> regularize_session(const ImuSession& session, const PipelineConfig& cfg);

/// A 20 Hz tri-axial stream after filtering and decimation.
struct AccelStream {
    std::string stream_id;
    std::vector<double> t;
    std::vector<double> ax, ay, az;

    size_t size() const { return t.size(); }
};
AccelStream filter_and_decimate(const ImuSegment& segment, const PipelineConfig& cfg);

/// Pair each GPS label with the window of the `w` most recent accelerometer
/// samples ending at the label time (within tolerance). Labels without a
/// full history are skipped silently and counted.
struct WindowExtraction {
    WindowedDataset dataset;
    int skipped_labels = 0;
};
WindowExtraction extract_windows(const AccelStream& accel, const GpsTrack& track, int window_size,
                                 double tolerance_s, const std::string& stamp_id = "");

/// Full per-session chain: parse -> GDOP gate -> regularize -> low-pass ->
/// decimate -> label windows.
struct SessionWindows {
    std::string session_id;
    WindowedDataset windows;
    int skipped_labels = 0;
    int segments = 0;
    size_t imu_samples = 0;  // raw count before gating
    size_t gps_points = 0;
};
SessionWindows windows_from_files(const std::string& session_id, const std::string& imu_path,
                                  const std::string& gps_path, int window_size,
                                  const PipelineConfig& cfg);

/// Session file pairs `<id>.imu.csv` / `<id>.gps.csv` in a directory,
/// sorted by session id.
struct SessionFiles {
    std::string session_id;
    std::string imu_path;
    std::string gps_path;
};
std::vector<SessionFiles> discover_sessions(const std::string& dir);

/// Hold out whole sessions for testing (before any pooling), then shuffle
/// the remaining windows and split them train:val by `val_fraction`.
struct SplitResult {
    WindowedDataset train;
    WindowedDataset val;
    WindowedDataset test;
    std::vector<std::string> test_session_ids;
};
SplitResult split_sessions(const std::vector<SessionWindows>& sessions, int test_session_count,
                           double val_fraction, uint64_t seed);

/// True if no train/val window comes from a held-out test session.
bool audit_no_leakage(const SplitResult& split);

// Per-axis z-score standardization. Fit only ever sees training windows.
NormStats standardize_fit(const WindowedDataset& train);
std::vector<double> standardize_apply(const NormStats& stats, const std::vector<double>& window);
std::vector<double> standardize_invert(const NormStats& stats, const std::vector<double>& window);

}  // namespace carspeed
