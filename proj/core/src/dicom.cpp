#include "thrid/dicom.hpp"

#include <algorithm>
#include <array>
#include <cstring>
#include <fstream>

#include <nlohmann/json.hpp>

#include "thrid/error.hpp"

namespace thrid::dicom {
namespace {

constexpr std::size_t kPreambleSize = 128;

// VRs with the 4-byte length form (2 reserved bytes + 32-bit length).
bool long_form(const std::string& vr) {
  static const std::array<const char*, 6> kLong = {"OB", "OW", "OF", "SQ", "UT", "UN"};
  return std::any_of(kLong.begin(), kLong.end(), [&](const char* v) { return vr == v; });
}

bool known_vr(const std::string& vr) {
  static const std::array<const char*, 27> kKnown = {
      "AE", "AS", "AT", "CS", "DA", "DS", "DT", "FL", "FD", "IS", "LO", "LT", "OB", "OF",
      "OW", "PN", "SH", "SL", "SQ", "SS", "ST", "TM", "UI", "UL", "UN", "US", "UT"};
  return std::any_of(kKnown.begin(), kKnown.end(), [&](const char* v) { return vr == v; });
}

struct Cursor {
  const std::vector<std::uint8_t>& bytes;
  std::size_t pos = 0;

  std::size_t remaining() const { return bytes.size() - pos; }

  void need(std::size_t n, const char* what) const {
    if (remaining() < n) {
      throw FormatError(std::string("truncated DICOM: need ") + std::to_string(n) +
                        " bytes for " + what + " at offset " + std::to_string(pos));
    }
  }

  std::uint16_t u16() {
    need(2, "u16");
    const std::uint16_t v = static_cast<std::uint16_t>(bytes[pos] | (bytes[pos + 1] << 8));
    pos += 2;
    return v;
  }

  std::uint32_t u32() {
    need(4, "u32");
    const std::uint32_t v = static_cast<std::uint32_t>(bytes[pos]) |
                            (static_cast<std::uint32_t>(bytes[pos + 1]) << 8) |
                            (static_cast<std::uint32_t>(bytes[pos + 2]) << 16) |
                            (static_cast<std::uint32_t>(bytes[pos + 3]) << 24);
    pos += 4;
    return v;
  }

  std::vector<std::uint8_t> take(std::size_t n, const char* what) {
    need(n, what);
    std::vector<std::uint8_t> v(bytes.begin() + static_cast<std::ptrdiff_t>(pos),
                                bytes.begin() + static_cast<std::ptrdiff_t>(pos + n));
    pos += n;
    return v;
  }
};

Element parse_element(Cursor& cur) {
  const std::size_t start = cur.pos;
  Element e;
  e.tag.group = cur.u16();
  e.tag.element = cur.u16();
  cur.need(2, "VR");
  e.vr = std::string(1, static_cast<char>(cur.bytes[cur.pos])) +
         std::string(1, static_cast<char>(cur.bytes[cur.pos + 1]));
  cur.pos += 2;
  if (!known_vr(e.vr)) {
    throw FormatError("unknown VR '" + e.vr + "' for " + e.tag.str() + " at offset " +
                      std::to_string(start));
  }
  std::uint32_t len = 0;
  if (long_form(e.vr)) {
    cur.u16();  // reserved
    len = cur.u32();
  } else {
    len = cur.u16();
  }
  if (len == 0xFFFFFFFFu) {
    throw FormatError("undefined-length element " + e.tag.str() + " is not supported");
  }
  if (cur.remaining() < len) {
    throw FormatError("element " + e.tag.str() + " declares " + std::to_string(len) +
                      " value bytes past end of file at offset " + std::to_string(cur.pos));
  }
  e.value = cur.take(len, "element value");
  return e;
}

void append_u16(std::vector<std::uint8_t>& out, std::uint16_t v) {
  out.push_back(static_cast<std::uint8_t>(v & 0xFF));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
}

void append_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  out.push_back(static_cast<std::uint8_t>(v & 0xFF));
  out.push_back(static_cast<std::uint8_t>((v >> 8) & 0xFF));
  out.push_back(static_cast<std::uint8_t>((v >> 16) & 0xFF));
  out.push_back(static_cast<std::uint8_t>((v >> 24) & 0xFF));
}

void append_element(std::vector<std::uint8_t>& out, const Element& e) {
  std::vector<std::uint8_t> value = e.value;
  if (value.size() % 2 != 0) {
    // Canonical padding: UI pads with NUL, text VRs with space, binary with 0.
    value.push_back(e.vr == "UI" ? 0x00 : (long_form(e.vr) ? 0x00 : 0x20));
  }
  append_u16(out, e.tag.group);
  append_u16(out, e.tag.element);
  out.push_back(static_cast<std::uint8_t>(e.vr[0]));
  out.push_back(static_cast<std::uint8_t>(e.vr[1]));
  if (long_form(e.vr)) {
    append_u16(out, 0);
    append_u32(out, static_cast<std::uint32_t>(value.size()));
  } else {
    if (value.size() > 0xFFFF) {
      throw FormatError("element " + e.tag.str() + " value too long for short-form VR " + e.vr);
    }
    append_u16(out, static_cast<std::uint16_t>(value.size()));
  }
  out.insert(out.end(), value.begin(), value.end());
}

std::string hex_of(const std::vector<std::uint8_t>& v) {
  static const char* kDigits = "0123456789abcdef";
  std::string s;
  s.reserve(v.size() * 2);
  for (std::uint8_t b : v) {
    s.push_back(kDigits[b >> 4]);
    s.push_back(kDigits[b & 0xF]);
  }
  return s;
}

char hex_nibble(std::uint16_t v) { return "0123456789abcdef"[v & 0xF]; }

std::string hex4(std::uint16_t v) {
  std::string s(4, '0');
  s[0] = hex_nibble(static_cast<std::uint16_t>(v >> 12));
  s[1] = hex_nibble(static_cast<std::uint16_t>(v >> 8));
  s[2] = hex_nibble(static_cast<std::uint16_t>(v >> 4));
  s[3] = hex_nibble(v);
  return s;
}

std::uint16_t read_u16_value(const Element& e, const char* what) {
  if (e.value.size() < 2) throw FormatError(std::string("missing or short ") + what);
  return static_cast<std::uint16_t>(e.value[0] | (e.value[1] << 8));
}

std::string trimmed_text(const Element& e) {
  std::string s(e.value.begin(), e.value.end());
  while (!s.empty() && (s.back() == ' ' || s.back() == '\0')) s.pop_back();
  return s;
}

}  // namespace

std::string Tag::str() const {
  return "(" + hex4(group) + "," + hex4(element) + ")";
}

const Element* File::find(Tag tag) const {
  for (const Element& e : elements) {
    if (e.tag == tag) return &e;
  }
  return nullptr;
}

File parse(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < kPreambleSize + 4) {
    throw FormatError("file too short for DICOM preamble");
  }
  if (std::memcmp(bytes.data() + kPreambleSize, "DICM", 4) != 0) {
    throw FormatError("missing DICM marker at offset 128");
  }
  Cursor cur{bytes, kPreambleSize + 4};

  File file;
  bool saw_dataset = false;
  Tag prev{0, 0};
  bool first = true;
  while (cur.remaining() > 0) {
    const Element e = parse_element(cur);
    if (e.tag.group == 0x0002) {
      if (saw_dataset) {
        throw FormatError("file meta element " + e.tag.str() + " after dataset elements");
      }
      if (e.tag == kTransferSyntaxUid) {
        file.transfer_syntax = trimmed_text(e);
        if (file.transfer_syntax != kExplicitVrLittleEndian) {
          throw FormatError("unsupported transfer syntax '" + file.transfer_syntax +
                            "' (only explicit VR little endian " +
                            std::string(kExplicitVrLittleEndian) + " is supported)");
        }
      }
      continue;  // meta elements are not part of the dataset
    }
    saw_dataset = true;
    if (!first && !(prev < e.tag)) {
      throw FormatError("elements out of order: " + prev.str() + " then " + e.tag.str());
    }
    prev = e.tag;
    first = false;
    file.elements.push_back(e);
  }

  // Validate pixel geometry when pixel data is present.
  if (const Element* px = file.find(kPixelData)) {
    (void)px;
    if (const Element* ba = file.find(kBitsAllocated)) {
      const std::uint16_t bits = read_u16_value(*ba, "bits allocated");
      if (bits != 8 && bits != 16) {
        throw FormatError("bits allocated must be 8 or 16, got " + std::to_string(bits));
      }
    }
  }
  return file;
}

std::vector<std::uint8_t> write(const std::vector<Element>& dataset) {
  std::vector<Element> sorted = dataset;
  std::sort(sorted.begin(), sorted.end(),
            [](const Element& a, const Element& b) { return a.tag < b.tag; });

  std::vector<std::uint8_t> out(kPreambleSize, 0);
  out.push_back('D');
  out.push_back('I');
  out.push_back('C');
  out.push_back('M');
  append_element(out, make_text(kTransferSyntaxUid, "UI", kExplicitVrLittleEndian));
  for (const Element& e : sorted) {
    if (e.tag.group == 0x0002) continue;  // meta is regenerated, never echoed
    append_element(out, e);
  }
  return out;
}

PhiPolicy PhiPolicy::defaults() {
  PhiPolicy p;
  // Patient identity (group 0010).
  p.removal = {
      kPatientName,
      kPatientId,
      kPatientBirthDate,
      kPatientSex,
      Tag{0x0010, 0x0032},  // birth time
      Tag{0x0010, 0x1000},  // other patient ids
      Tag{0x0010, 0x1001},  // other patient names
      Tag{0x0010, 0x1010},  // age
      Tag{0x0010, 0x1020},  // height
      Tag{0x0010, 0x1030},  // weight
      Tag{0x0010, 0x2160},  // ethnic group
      Tag{0x0010, 0x21B0},  // additional history
      Tag{0x0010, 0x4000},  // comments
      // Institution and physician names (group 0008).
      Tag{0x0008, 0x0050},  // accession number
      Tag{0x0008, 0x0080},  // institution name
      Tag{0x0008, 0x0081},  // institution address
      Tag{0x0008, 0x0090},  // referring physician
      Tag{0x0008, 0x1040},  // institutional department
      Tag{0x0008, 0x1048},  // physicians of record
      Tag{0x0008, 0x1050},  // performing physician
      Tag{0x0008, 0x1060},  // reading physician
      Tag{0x0008, 0x1070},  // operators' name
  };
  return p;
}

AnonymizeResult anonymize(const File& file, const PhiPolicy& policy) {
  if (policy.removal.count(kPixelData) > 0) {
    throw FormatError("PHI policy must never list the pixel-data tag");
  }
  AnonymizeResult result;
  result.clean.transfer_syntax = file.transfer_syntax;
  for (const Element& e : file.elements) {
    if (policy.removal.count(e.tag) > 0) {
      result.quarantined.push_back(e);
    } else {
      result.clean.elements.push_back(e);
    }
  }
  return result;
}

void write_sidecar(const std::filesystem::path& path, const std::vector<Element>& quarantined) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open sidecar " + path.string());
  for (const Element& e : quarantined) {
    nlohmann::json row;
    row["group"] = hex4(e.tag.group);
    row["element"] = hex4(e.tag.element);
    row["vr"] = e.vr;
    row["value_hex"] = hex_of(e.value);
    out << row.dump() << '\n';
  }
}

GrayImage export_image(const File& file) {
  const Element* px = file.find(kPixelData);
  if (!px) throw FormatError("missing pixel data " + kPixelData.str());
  const Element* rows_e = file.find(kRows);
  const Element* cols_e = file.find(kColumns);
  if (!rows_e || !cols_e) throw FormatError("missing rows/columns tags");
  const int rows = read_u16_value(*rows_e, "rows");
  const int cols = read_u16_value(*cols_e, "columns");
  int bits = 8;
  if (const Element* ba = file.find(kBitsAllocated)) bits = read_u16_value(*ba, "bits allocated");
  if (bits != 8 && bits != 16) {
    throw FormatError("bits allocated must be 8 or 16, got " + std::to_string(bits));
  }

  bool invert = false;
  if (const Element* ph = file.find(kPhotometricInterpretation)) {
    const std::string v = trimmed_text(*ph);
    if (v == "MONOCHROME1") {
      invert = true;
    } else if (v != "MONOCHROME2") {
      throw FormatError("unsupported photometric interpretation '" + v + "'");
    }
  }

  const std::size_t n = static_cast<std::size_t>(rows) * static_cast<std::size_t>(cols);
  GrayImage img(cols, rows);
  if (bits == 8) {
    if (px->value.size() < n) throw FormatError("pixel data shorter than rows*columns");
    for (std::size_t i = 0; i < n; ++i) img.pixels[i] = px->value[i];
  } else {
    if (px->value.size() < 2 * n) throw FormatError("pixel data shorter than rows*columns*2");
    std::vector<std::uint16_t> v(n);
    for (std::size_t i = 0; i < n; ++i) {
      v[i] = static_cast<std::uint16_t>(px->value[2 * i] | (px->value[2 * i + 1] << 8));
    }
    const auto [mn_it, mx_it] = std::minmax_element(v.begin(), v.end());
    const std::uint16_t mn = *mn_it, mx = *mx_it;
    if (mn == mx) {
      std::fill(img.pixels.begin(), img.pixels.end(), 0);  // degenerate window
    } else {
      const double scale = 255.0 / static_cast<double>(mx - mn);
      for (std::size_t i = 0; i < n; ++i) {
        img.pixels[i] = static_cast<std::uint8_t>(
            std::lround(static_cast<double>(v[i] - mn) * scale));
      }
    }
  }
  if (invert) {
    for (auto& p : img.pixels) p = static_cast<std::uint8_t>(255 - p);
  }
  return img;
}

Element make_text(Tag tag, const std::string& vr, const std::string& text) {
  Element e;
  e.tag = tag;
  e.vr = vr;
  e.value.assign(text.begin(), text.end());
  if (e.value.size() % 2 != 0) e.value.push_back(vr == "UI" ? 0x00 : 0x20);
  return e;
}

Element make_u16(Tag tag, std::uint16_t value) {
  Element e;
  e.tag = tag;
  e.vr = "US";
  append_u16(e.value, value);
  return e;
}

Element make_u32(Tag tag, std::uint32_t value) {
  Element e;
  e.tag = tag;
  e.vr = "UL";
  append_u32(e.value, value);
  return e;
}

Element make_pixels_u8(const GrayImage& img) {
  Element e;
  e.tag = kPixelData;
  e.vr = "OB";
  e.value = img.pixels;
  if (e.value.size() % 2 != 0) e.value.push_back(0);
  return e;
}

Element make_pixels_u16(int rows, int cols, const std::vector<std::uint16_t>& px) {
  if (px.size() != static_cast<std::size_t>(rows) * static_cast<std::size_t>(cols)) {
    throw FormatError("pixel vector does not match rows*columns");
  }
  Element e;
  e.tag = kPixelData;
  e.vr = "OW";
  e.value.reserve(px.size() * 2);
  for (std::uint16_t v : px) append_u16(e.value, v);
  return e;
}

std::uint64_t checksum(const std::vector<std::uint8_t>& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (std::uint8_t b : bytes) {
    h ^= b;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace thrid::dicom
