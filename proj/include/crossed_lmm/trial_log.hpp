#pragma once

#include <Eigen/Dense>

#include <vector>

namespace crossed_lmm {

using Eigen::Index;

// One Thompson-sampling decision. `time` is the day in study (0-based) and
// `week_in_study` is 1-based counted from the user's own entry.
struct DecisionRecord {
    Index user = 0;
    Index time = 0;
    Index decision = 0;
    int week_in_study = 1;
    Eigen::VectorXd context;
    Eigen::VectorXd pi;
    int action = 0;
    double reward = 0.0;
    Eigen::VectorXd expected;  // true expected reward of every action
    double regret = 0.0;
};

struct BanditTrialLog {
    std::vector<DecisionRecord> records;
    std::vector<double> weekly_regret;  // index w-1 holds week-in-study w
    double variance_estimation_seconds = 0.0;
    int refits = 0;
};

}  // namespace crossed_lmm
