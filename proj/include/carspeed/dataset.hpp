#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "carspeed/util.hpp"

namespace carspeed {

/// Raw accelerometer log: timestamps in seconds from session start, specific
/// force in m/s^2 in the phone frame. Timestamps are strictly increasing.
struct ImuSample {
    double t;
    double ax, ay, az;
};

struct ImuSession {
    std::string session_id;
    std::vector<ImuSample> samples;
    double nominal_rate_hz = 500.0;
};

/// GPS speed log at a nominal 1 Hz: speed in m/s (>= 0) plus the GDOP
/// geometry quality value (lower is better).
struct GpsPoint {
    double t;
    double speed;
    double gdop;
};

struct GpsTrack {
    std::string session_id;
    std::vector<GpsPoint> points;
};

/// One training example: a w x 3 block of consecutive 20 Hz samples ending
/// at a GPS label time, paired with that label.
struct WindowEntry {
    std::vector<double> window;  // row-major w x 3, m/s^2
    double label = 0.0;          // m/s
    double t_label = 0.0;        // seconds
    std::string session_id;
};

struct WindowedDataset {
    int window_size = 0;
    std::vector<WindowEntry> entries;

    size_t size() const { return entries.size(); }
    bool empty() const { return entries.empty(); }
};

/// Per-axis input standardization, fitted on training windows only and
/// stored with the trained weights.
struct NormStats {
    std::array<double, 3> mean{0.0, 0.0, 0.0};
    std::array<double, 3> stddev{1.0, 1.0, 1.0};
    bool fitted = false;
};

}  // namespace carspeed
