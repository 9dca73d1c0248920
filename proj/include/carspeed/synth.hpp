#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "carspeed/dataset.hpp"

namespace carspeed {

/// Piecewise-linear speed profile: each segment ramps v0 -> v1 over its
/// duration with a constant yaw rate. Profiles start and end stopped and
/// stay inside the passenger-car envelope (|dv/dt| <= 4 m/s^2, v <= 40 m/s).
struct ProfileSegment {
    double duration;
    double v0, v1;
    double yaw_rate;  // rad/s
};

struct DriveProfile {
    double duration = 0.0;
    std::vector<ProfileSegment> segments;
    std::vector<double> starts;  // cumulative segment start times

    double speed_at(double t) const;
    double accel_at(double t) const;
    double yaw_rate_at(double t) const;
    void rebuild_index();
};

DriveProfile gen_profile(double duration_s, uint64_t seed);

/// Fixed phone mounting: rotation from the vehicle frame into the phone
/// frame, a constant accelerometer bias and white measurement noise.
struct MountModel {
    std::array<double, 9> rotation{1, 0, 0, 0, 1, 0, 0, 0, 1};  // row-major
    std::array<double, 3> bias{0, 0, 0};                        // m/s^2
    double noise_std = 0.05;                                    // m/s^2

    static constexpr double gravity = 9.80665;  // m/s^2

    void validate() const;  // rotation orthonormal within 1e-9, noise_std >= 0
    static MountModel identity(double noise_std = 0.0);
    /// Small random tilt (up to max_tilt_deg) and per-axis bias.
    static MountModel randomized(uint64_t seed, double max_tilt_deg, double max_bias,
                                 double noise_std);
};

/// Speed-proportional road vibration: per axis one component below the
/// anti-alias cutoff (visible to the model after decimation) and one above
/// it (mostly filtered out). Phases and small amplitude jitter vary per
/// session.
struct VibrationModel {
    std::array<double, 3> low_freq_hz{2.1, 3.7, 5.9};
    std::array<double, 3> low_amp{0.012, 0.018, 0.030};  // m/s^2 per m/s of speed
    std::array<double, 3> high_freq_hz{17.0, 23.0, 31.0};
    std::array<double, 3> high_amp{0.006, 0.008, 0.015};
    double amp_jitter = 0.05;  // relative, per session
};

/// Render the accelerometer stream at 500 Hz: specific force in the vehicle
/// frame is (dv/dt, v * yaw_rate, +g) plus vibration, rotated into the phone
/// frame, plus bias and Gaussian noise.
ImuSession render_imu(const DriveProfile& profile, const MountModel& mount, uint64_t seed,
                      const VibrationModel& vibration = {}, double rate_hz = 500.0);

/// GDOP trajectory: poor geometry during a warm-up, locked afterwards.
struct GdopProfile {
    double warmup_s = 10.0;
    double start = 8.0;
    double locked = 1.5;
    double wiggle = 0.2;

    double at(double t) const;
};

/// Render the 1 Hz GPS track: profile speed plus Gaussian noise clamped at
/// zero, with the GDOP warm-up exercising the gating stage.
GpsTrack render_gps(const DriveProfile& profile, double noise_std, const GdopProfile& gdop,
                    uint64_t seed);

struct SynthConfig {
    double imu_noise_std = 0.05;  // m/s^2
    double gps_noise_std = 0.2;   // m/s
    double max_bias = 0.1;        // m/s^2 per axis
    double max_tilt_deg = 10.0;
    GdopProfile gdop;
    VibrationModel vibration;
};

/// Write `<id>.imu.csv` / `<id>.gps.csv` in the signal-pipeline format.
/// Deterministic per seed; the files parse back losslessly at the emitted
/// precision.
struct EmittedSession {
    std::string session_id;
    std::string imu_path;
    std::string gps_path;
    double duration_s = 0.0;
    uint64_t profile_seed = 0;
};
EmittedSession emit_session(const DriveProfile& profile, const MountModel& mount,
                            const std::string& out_dir, uint64_t seed,
                            const SynthConfig& cfg = {}, const std::string& session_id = "");

/// Generate a whole corpus totalling at least `hours` of driving. With
/// n_sessions == 0 the session lengths are drawn from 300-600 s; otherwise
/// exactly n_sessions equal-length sessions are produced.
std::vector<EmittedSession> synth_corpus(const std::string& out_dir, double hours, int n_sessions,
                                         uint64_t seed, const SynthConfig& cfg = {});

}  // namespace carspeed
