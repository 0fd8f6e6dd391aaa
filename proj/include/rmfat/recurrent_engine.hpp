#pragma once
// Frame-by-frame recurrence over a sequence, with the buffer of past restored outputs
// and their accumulated flows.

#include <cstdint>
#include <deque>
#include <functional>
#include <map>
#include <optional>
#include <vector>

#include "rmfat/network.hpp"
#include "rmfat/video_core.hpp"

namespace rmfat {

struct HistoryEntry {
    Frame output;     ///< O_{t-k}
    FlowField flow;   ///< F_{t-k -> t}, full resolution
};

/// entries.front() is k = 1 (most recent).
struct HistoryBuffer {
    std::deque<HistoryEntry> entries;
    std::size_t capacity = 4;

    std::size_t size() const { return entries.size(); }
    bool empty() const { return entries.empty(); }
};

/// Composes every stored flow with step_flow (F_{t-1 -> t}), inserts new_output at k = 1
/// with flow step_flow, and evicts beyond capacity.
HistoryBuffer update_buffer(const HistoryBuffer& buffer, const Frame& new_output,
                            const FlowField& step_flow);

struct WarpedHistory {
    std::vector<Frame> warped;  ///< O_t^(k), k = 1..n

    std::size_t size() const { return warped.size(); }
    bool empty() const { return warped.empty(); }
};

WarpedHistory warp_history(const HistoryBuffer& buffer, int64_t height, int64_t width);

struct RestorationTrace {
    Frame restored;
    std::map<Scale, FlowField> flows;
    FlowField step_flow;  ///< zeros when the network exports no flow
    WarpedHistory history;
};

struct EngineOptions {
    int64_t history_size = 4;
    /// false: previous input is the degraded I_{t-1} instead of O_{t-1}.
    bool recurrent = true;
    /// Inference runs without autograd and clamps outputs to [0, 1].
    bool inference = true;
};

/// Stateful per-stream runner. Not shareable across threads.
class RecurrentEngine {
public:
    RecurrentEngine(RmfatNet net, EngineOptions options);

    RestorationTrace step(const Frame& degraded);
    void reset();
    /// Cuts the autograd graph through the carried previous output.
    void detach_state();

    int64_t frames_processed() const { return frames_; }
    const HistoryBuffer& buffer() const { return buffer_; }
    const EngineOptions& options() const { return options_; }

    /// Bytes held in carried state (previous frame plus history buffer).
    std::size_t retained_bytes() const;
    std::size_t peak_retained_bytes() const { return peak_bytes_; }

private:
    RmfatNet net_;
    EngineOptions options_;
    HistoryBuffer buffer_;
    Frame previous_output_;
    Frame previous_input_;
    int64_t frames_ = 0;
    std::size_t peak_bytes_ = 0;
};

struct SequenceResult {
    VideoSequence restored;
    std::vector<RestorationTrace> traces;
};

SequenceResult run_sequence(RmfatNet net, const VideoSequence& degraded,
                            const EngineOptions& options = {});

/// Streaming variant: traces are handed to sink and not retained.
void run_sequence(RmfatNet net, const VideoSequence& degraded, const EngineOptions& options,
                  const std::function<void(std::size_t, RestorationTrace&&)>& sink);

}  // namespace rmfat
