// Copyright 2026 The ssm-sep Authors
// License: Apache 2.0 (http://www.apache.org/licenses/LICENSE-2.0)

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>

#include "ssmsep/errors.h"
#include "ssmsep/spectral.h"

// Little-endian host assumed (x86-64, aarch64).

namespace ssmsep {

namespace {

constexpr std::uint16_t kTagPcm = 1;
constexpr std::uint16_t kTagFloat = 3;
constexpr std::uint16_t kTagExtensible = 0xFFFE;

template <typename U>
U load(const char* p) {
  U v;
  std::memcpy(&v, p, sizeof(U));
  return v;
}

template <typename U>
void store(std::string& out, U v) {
  char b[sizeof(U)];
  std::memcpy(b, &v, sizeof(U));
  out.append(b, sizeof(U));
}

}  // namespace

AudioBuffer read_wav(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const auto fail = [&](const std::string& why) { return IoError(path.string() + ": " + why); };
  if (bytes.size() < 12 || bytes.compare(0, 4, "RIFF") != 0 || bytes.compare(8, 4, "WAVE") != 0)
    throw fail("not a RIFF/WAVE file");

  std::uint16_t tag = 0, channels = 0, bits = 0;
  std::uint32_t rate = 0;
  bool have_fmt = false;
  std::size_t pos = 12;
  while (pos + 8 <= bytes.size()) {
    const std::string id = bytes.substr(pos, 4);
    const std::size_t len = load<std::uint32_t>(bytes.data() + pos + 4);
    const std::size_t body = pos + 8;
    if (body + len > bytes.size() && id != "data") throw fail("truncated chunk " + id);
    if (id == "fmt ") {
      if (len < 16) throw fail("short fmt chunk");
      tag = load<std::uint16_t>(bytes.data() + body);
      channels = load<std::uint16_t>(bytes.data() + body + 2);
      rate = load<std::uint32_t>(bytes.data() + body + 4);
      bits = load<std::uint16_t>(bytes.data() + body + 14);
      if (tag == kTagExtensible) {
        if (len < 26) throw fail("short extensible fmt chunk");
        tag = load<std::uint16_t>(bytes.data() + body + 24);
      }
      have_fmt = true;
    } else if (id == "data") {
      if (!have_fmt) throw fail("data chunk before fmt chunk");
      if (channels != 1) throw fail("only mono is supported, got " + std::to_string(channels) + " channels");
      if (rate == 0) throw fail("zero sample rate");
      const std::size_t avail = std::min(len, bytes.size() - body);
      AudioBuffer out;
      out.sample_rate = int(rate);
      const char* p = bytes.data() + body;
      if (tag == kTagPcm && bits == 16) {
        out.samples.resize(avail / 2);
        for (std::size_t i = 0; i < out.samples.size(); ++i)
          out.samples[i] = float(load<std::int16_t>(p + 2 * i)) / 32768.0f;
      } else if (tag == kTagFloat && bits == 32) {
        out.samples.resize(avail / 4);
        for (std::size_t i = 0; i < out.samples.size(); ++i) out.samples[i] = load<float>(p + 4 * i);
      } else {
        throw fail("unsupported encoding (format " + std::to_string(tag) + ", " +
                   std::to_string(bits) + " bits)");
      }
      return out;
    }
    pos = body + len + (len & 1);
  }
  throw fail("no data chunk");
}

void write_wav(const std::filesystem::path& path, const AudioBuffer& audio, WavFormat format) {
  if (audio.sample_rate <= 0) throw DomainError("write_wav: sample_rate must be positive");
  const bool pcm = format == WavFormat::kPcm16;
  const std::uint16_t bytes_per = pcm ? 2 : 4;
  const auto data_len = std::uint32_t(audio.samples.size() * bytes_per);

  std::string out;
  out.reserve(44 + data_len);
  out += "RIFF";
  store<std::uint32_t>(out, 36 + data_len);
  out += "WAVEfmt ";
  store<std::uint32_t>(out, 16);
  store<std::uint16_t>(out, pcm ? kTagPcm : kTagFloat);
  store<std::uint16_t>(out, 1);
  store<std::uint32_t>(out, std::uint32_t(audio.sample_rate));
  store<std::uint32_t>(out, std::uint32_t(audio.sample_rate) * bytes_per);
  store<std::uint16_t>(out, bytes_per);
  store<std::uint16_t>(out, std::uint16_t(8 * bytes_per));
  out += "data";
  store<std::uint32_t>(out, data_len);
  for (float v : audio.samples) {
    if (pcm) {
      const long q = std::lround(double(v) * 32768.0);
      store<std::int16_t>(out, std::int16_t(std::clamp(q, -32768L, 32767L)));
    } else {
      store<float>(out, v);
    }
  }
  if (data_len & 1) out.push_back('\0');

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot write " + path.string());
  f.write(out.data(), std::streamsize(out.size()));
  if (!f) throw IoError("write failed: " + path.string());
}

}  // namespace ssmsep
