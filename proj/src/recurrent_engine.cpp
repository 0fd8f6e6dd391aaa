#include "rmfat/recurrent_engine.hpp"

#include <optional>

namespace rmfat {

HistoryBuffer update_buffer(const HistoryBuffer& buffer, const Frame& new_output,
                            const FlowField& step_flow) {
    if (new_output.height() != step_flow.height() || new_output.width() != step_flow.width()) {
        throw ShapeError("update_buffer: step flow does not match output dims");
    }
    HistoryBuffer next;
    next.capacity = buffer.capacity;
    if (next.capacity == 0) return next;
    next.entries.push_back({new_output, step_flow});
    for (const auto& e : buffer.entries) {
        if (next.entries.size() >= next.capacity) break;
        if (e.output.height() != new_output.height() || e.output.width() != new_output.width()) {
            throw ShapeError("update_buffer: buffered frame dims differ from the new output");
        }
        next.entries.push_back({e.output, compose_flows(e.flow, step_flow)});
    }
    return next;
}

WarpedHistory warp_history(const HistoryBuffer& buffer, int64_t height, int64_t width) {
    WarpedHistory out;
    out.warped.reserve(buffer.size());
    for (const auto& e : buffer.entries) {
        if (e.output.height() != height || e.output.width() != width ||
            e.flow.height() != height || e.flow.width() != width) {
            throw ShapeError("warp_history: buffer entry dims do not match the current frame");
        }
        out.warped.push_back(warp_frame(e.output, e.flow));
    }
    return out;
}

// -- engine ---------------------------------------------------------------------------

RecurrentEngine::RecurrentEngine(RmfatNet net, EngineOptions options)
    : net_(std::move(net)), options_(options) {
    if (options_.history_size < 0) throw ConfigError("history size must be >= 0");
    buffer_.capacity = static_cast<std::size_t>(options_.history_size);
}

void RecurrentEngine::reset() {
    buffer_.entries.clear();
    previous_output_ = Frame();
    previous_input_ = Frame();
    frames_ = 0;
}

void RecurrentEngine::detach_state() {
    if (previous_output_.defined()) previous_output_ = Frame(previous_output_.pixels().detach());
}

std::size_t RecurrentEngine::retained_bytes() const {
    auto bytes = [](const torch::Tensor& t) {
        return t.defined() ? static_cast<std::size_t>(t.nbytes()) : std::size_t{0};
    };
    std::size_t total = bytes(previous_output_.pixels()) + bytes(previous_input_.pixels());
    for (const auto& e : buffer_.entries) total += bytes(e.output.pixels()) + bytes(e.flow.field());
    return total;
}

RestorationTrace RecurrentEngine::step(const Frame& degraded) {
    std::optional<torch::NoGradGuard> no_grad;
    if (options_.inference) no_grad.emplace();

    Frame previous;
    if (frames_ == 0) {
        previous = degraded;  // bootstrap: O_{-1} := I_0
    } else if (options_.recurrent) {
        // training outputs are unclamped; the carried input must stay in range
        previous = Frame(previous_output_.pixels().clamp(0.0, 1.0));
    } else {
        previous = previous_input_;
    }

    StepOutput out = net_->restore_step(RecurrentInput(degraded, previous), options_.inference);

    RestorationTrace trace;
    trace.restored = out.restored;
    trace.flows = std::move(out.flows);
    const auto h = degraded.height();
    const auto w = degraded.width();
    trace.step_flow = out.step_flow ? *out.step_flow
                                    : FlowField::zeros(h, w, Scale::L1,
                                                       out.restored.pixels().scalar_type());

    if (frames_ > 0) {
        // history frames are constants; only the live step flow carries gradient
        buffer_ = update_buffer(buffer_, Frame(previous_output_.pixels().detach()), trace.step_flow);
        trace.history = warp_history(buffer_, h, w);
        for (auto& e : buffer_.entries) e.flow = e.flow.detached();
    }

    previous_output_ = out.restored;
    if (!options_.recurrent) previous_input_ = degraded;
    ++frames_;
    peak_bytes_ = std::max(peak_bytes_, retained_bytes());
    return trace;
}

// -- sequences ------------------------------------------------------------------------

void run_sequence(RmfatNet net, const VideoSequence& degraded, const EngineOptions& options,
                  const std::function<void(std::size_t, RestorationTrace&&)>& sink) {
    degraded.validate();
    RecurrentEngine engine(std::move(net), options);
    for (std::size_t t = 0; t < degraded.size(); ++t) sink(t, engine.step(degraded.frames[t]));
}

SequenceResult run_sequence(RmfatNet net, const VideoSequence& degraded,
                            const EngineOptions& options) {
    SequenceResult result;
    result.restored.role = SequenceRole::Restored;
    result.restored.frame_rate = degraded.frame_rate;
    run_sequence(std::move(net), degraded, options, [&](std::size_t, RestorationTrace&& trace) {
        result.restored.frames.push_back(trace.restored);
        result.traces.push_back(std::move(trace));
    });
    return result;
}

}  // namespace rmfat
