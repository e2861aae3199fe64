#ifndef XMODNET_TAPE_HPP
#define XMODNET_TAPE_HPP

#include <functional>
#include <utility>
#include <vector>

#include "xmodnet/tensor.hpp"

namespace xmodnet {

/// Reverse-mode autodiff tape.
///
/// Ops append one entry per executed operation, in execution order: the op's
/// output tensor plus a closure that reads the output gradient and accumulates
/// into the input gradients. backward() replays the entries exactly once in
/// reverse.
///
/// Gradient contract: leaf tensors (user-created inputs and parameters)
/// accumulate across backward() calls; op outputs are transient and reset at
/// the start of each backward() so a second call doubles only the leaves.
template <typename T>
class Tape {
public:
    Tape() = default;
    explicit Tape(bool recording) : recording_(recording) {}

    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    bool recording() const { return recording_; }
    void set_recording(bool on) { recording_ = on; }

    void record(Tensor<T> output, std::function<void()> backward_step) {
        output.mark_as_output();
        entries_.push_back(Entry{std::move(output), std::move(backward_step)});
    }

    std::size_t size() const { return entries_.size(); }
    bool empty() const { return entries_.empty(); }
    void clear() { entries_.clear(); }

    void run_backward(Tensor<T>& loss) {
        if (loss.size() != 1)
            throw ShapeError("backward: loss must be scalar, got " + shape_str(loss.shape()));
        for (Entry& e : entries_)
            e.output.zero_grad();
        loss.grad()[0] += T(1);
        for (auto it = entries_.rbegin(); it != entries_.rend(); ++it)
            it->backward_step();
    }

private:
    struct Entry {
        Tensor<T> output;
        std::function<void()> backward_step;
    };
    std::vector<Entry> entries_;
    bool recording_ = true;
};

/// Accumulates dloss/dx into the grad buffer of every requires_grad tensor
/// reachable from loss through the tape.
template <typename T>
inline void backward(Tensor<T> loss, Tape<T>& tape) {
    tape.run_backward(loss);
}

} // namespace xmodnet

#endif // XMODNET_TAPE_HPP
