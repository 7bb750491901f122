#pragma once

#include <compare>
#include <cstdint>
#include <filesystem>
#include <set>
#include <string>
#include <vector>

#include "thrid/image.hpp"

namespace thrid::dicom {

struct Tag {
  std::uint16_t group = 0;
  std::uint16_t element = 0;
  auto operator<=>(const Tag&) const = default;
  std::string str() const;  // "(0010,0010)"
};

struct Element {
  Tag tag;
  std::string vr;  // two-letter value representation
  std::vector<std::uint8_t> value;
  bool operator==(const Element&) const = default;
};

inline constexpr Tag kTransferSyntaxUid{0x0002, 0x0010};
inline constexpr Tag kPatientName{0x0010, 0x0010};
inline constexpr Tag kPatientId{0x0010, 0x0020};
inline constexpr Tag kPatientBirthDate{0x0010, 0x0030};
inline constexpr Tag kPatientSex{0x0010, 0x0040};
inline constexpr Tag kPhotometricInterpretation{0x0028, 0x0004};
inline constexpr Tag kRows{0x0028, 0x0010};
inline constexpr Tag kColumns{0x0028, 0x0011};
inline constexpr Tag kBitsAllocated{0x0028, 0x0100};
inline constexpr Tag kPixelData{0x7FE0, 0x0010};

inline constexpr char kExplicitVrLittleEndian[] = "1.2.840.10008.1.2.1";

// A parsed dataset. Group-0002 file meta elements are consumed during parsing
// (only the transfer syntax is kept); `elements` holds the dataset proper in
// strictly ascending tag order.
struct File {
  std::string transfer_syntax = kExplicitVrLittleEndian;
  std::vector<Element> elements;

  const Element* find(Tag tag) const;
};

// Parses a Part-10 subset file: 128-byte preamble, "DICM", explicit VR little
// endian only. Throws FormatError naming the problem and byte offset.
File parse(const std::vector<std::uint8_t>& bytes);

// Canonical writer for the same subset: zero preamble, "DICM", a minimal
// group-0002 header declaring explicit VR little endian, then the dataset in
// ascending tag order with even-length values.
std::vector<std::uint8_t> write(const std::vector<Element>& dataset);

// Identity tags removed by default. The pixel-data tag can never be listed.
struct PhiPolicy {
  std::set<Tag> removal;
  static PhiPolicy defaults();
};

struct AnonymizeResult {
  File clean;
  std::vector<Element> quarantined;
};

// Removes every policy tag from the dataset; removed elements are returned
// for the quarantine sidecar. Pixel data and all other elements pass through
// byte-identical. Absent tags are a no-op, so the operation is idempotent.
AnonymizeResult anonymize(const File& file, const PhiPolicy& policy);

// One JSON object per removed element: {"group","element","vr","value_hex"}.
void write_sidecar(const std::filesystem::path& path, const std::vector<Element>& quarantined);

// Renders the pixel data as 8-bit grayscale. 16-bit sources are min-max
// windowed (a constant image maps to 0); 8-bit sources pass through.
GrayImage export_image(const File& file);

// Element builders used to manufacture test corpora and synthetic inputs.
Element make_text(Tag tag, const std::string& vr, const std::string& text);
Element make_u16(Tag tag, std::uint16_t value);                      // VR US
Element make_u32(Tag tag, std::uint32_t value);                      // VR UL
Element make_pixels_u8(const GrayImage& img);                        // VR OB
Element make_pixels_u16(int rows, int cols, const std::vector<std::uint16_t>& px);  // VR OW

std::uint64_t checksum(const std::vector<std::uint8_t>& bytes);      // FNV-1a

}  // namespace thrid::dicom
