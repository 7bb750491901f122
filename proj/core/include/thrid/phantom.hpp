#pragma once

#include <array>
#include <cstdint>
#include <filesystem>

#include "thrid/dataset.hpp"
#include "thrid/image.hpp"
#include "thrid/rng.hpp"

namespace thrid {

// Three stylized stem designs. The class-defining cues are the tip profile
// (every class), the collar plate (B only), the metaphyseal sleeve (C only)
// and the cup rim style (A and C share one, B gets the other). All remaining
// geometry ranges overlap across classes, so none of it can carry the label.
enum class DesignClass { A = 0, B = 1, C = 2 };

std::string design_label(DesignClass c);
DesignClass design_from_label(const std::string& label);

// Geometry is expressed in pixels at the 96-px reference frame; render()
// scales everything by size/96.
struct PhantomScene {
  DesignClass design_class = DesignClass::A;
  // geometry
  double medial_offset_px = 13.0;      // head center shift toward the midline
  double vertical_height_px = 12.0;    // head center lift above the shoulder
  double neck_shaft_angle_deg = 132.0; // neck elbow direction
  double stem_length_px = 46.0;        // shoulder to distal end
  int tip_profile = 0;                 // 0 tapered, 1 rounded, 2 flat
  bool collar = false;                 // class B
  bool sleeve = false;                 // class C
  // nuisance
  std::uint64_t texture_seed = 0;
  int clutter_count = 4;
  double rotation_deg = 0.0;
  double exposure_gain = 1.0;
};

struct PhantomMasks {
  GrayImage implant;  // union of all implant parts (cup included)
  GrayImage tip;      // distal stem region
  GrayImage collar;   // empty unless class B
  GrayImage sleeve;   // empty unless class C
  GrayImage cup;      // acetabular shell
};

struct RenderedPhantom {
  GrayImage image;
  PhantomMasks masks;
};

// Deterministic function of the scene. Feature masks are subsets of the
// implant mask; the implant is the brightest structure in the image.
RenderedPhantom render(const PhantomScene& scene, int size);

// Samples a scene for the class. Nuisance parameters come from a substream
// that does not depend on the class, so their distribution is identical
// across classes (equal seeds give equal nuisance values).
PhantomScene sample_scene(DesignClass cls, Rng& rng);

// Writes counts[0]+counts[1]+counts[2] images (classes A, B, C) plus their
// five mask PNGs and a manifest.jsonl with relative paths under out_dir.
// Byte-reproducible from the seed regardless of the worker thread count.
DatasetManifest generate_dataset(const std::array<int, 3>& counts, int size, std::uint64_t seed,
                                 const std::filesystem::path& out_dir);

// Donor-task corpus over the same background machinery: class A = circles,
// B = convex polygons, C = line bundles. No masks.
DatasetManifest generate_shapes_dataset(const std::array<int, 3>& counts, int size,
                                        std::uint64_t seed,
                                        const std::filesystem::path& out_dir);

}  // namespace thrid
