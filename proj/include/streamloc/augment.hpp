#pragma once

#include <string>
#include <vector>

#include "streamloc/data.hpp"
#include "streamloc/tensor.hpp"

namespace streamloc {

enum class InterpKernel { kBlend, kFlow };

// Interpolate between two frames [C,H,W] at blend position alpha in [0,1].
// kBlend cross-fades; kFlow estimates per-block motion (8x8 blocks, +/-4 px
// search) and samples both frames along it before cross-fading. alpha 0 and 1
// return bit-exact copies of a and b for either kernel.
Tensor interpolate_pair(const Tensor& a, const Tensor& b, double alpha,
                        InterpKernel kernel);

struct SpeedUpResult {
  AnnotatedStream stream;
  int dropped_intervals = 0;  // remapped to zero sampled frames
};

// Keep every factor-th frame (0, f, 2f, ...). Interval [s, e) maps to the
// surviving sample indices [ceil(s/f), ceil(e/f)); degenerate results are
// dropped and counted.
SpeedUpResult speed_up(const AnnotatedStream& s, int factor);

// Double the frame rate: even output index 2i is input frame i (bit-exact),
// odd 2i+1 interpolates frames i and i+1 at alpha = 0.5. Length 2T-1;
// interval boundary i maps to 2i.
AnnotatedStream slow_down(const AnnotatedStream& s, InterpKernel kernel);

// The standard augmentation recipe: for each input stream add a 2x sped-up
// and a 2x slowed-down variant (flow kernel). Originals come first.
Dataset augment_dataset(const Dataset& ds, int* dropped_intervals = nullptr);

}  // namespace streamloc
