#include "robomal/corpus.hpp"

#include "robomal/random.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>

namespace robomal {

std::string_view to_string(Behavior b) {
  switch (b) {
    case Behavior::Nominal: return "nominal";
    case Behavior::Crash: return "crash";
    case Behavior::Stalled: return "stalled";
    case Behavior::WrongDirection: return "wrong_direction";
    case Behavior::ExcessiveDeviation: return "excessive_deviation";
  }
  return "unknown";
}

Behavior parse_behavior(std::string_view name) {
  for (Behavior b : {Behavior::Nominal, Behavior::Crash, Behavior::Stalled, Behavior::WrongDirection,
                     Behavior::ExcessiveDeviation})
    if (to_string(b) == name) return b;
  throw std::invalid_argument("unknown behavior '" + std::string(name) + "'");
}

SimResult simulate(const ControllerParams& p, const SimSettings& s) {
  SimResult r;
  double d = p.d_ref + s.initial_offset;
  double theta = s.initial_heading;
  bool crashed = false;
  const auto steps = static_cast<std::size_t>(std::llround(s.duration / s.dt));
  r.max_deviation = std::abs(d - p.d_ref);
  for (std::size_t i = 0; i < steps; ++i) {
    const double d_dot = p.v * std::sin(theta);
    double u = p.steer_sign * (-p.kp * (d - p.d_ref) - p.kd * d_dot);
    u = std::clamp(u, -s.max_steer, s.max_steer);
    theta += u * s.dt * p.v / s.wheelbase;
    d += p.v * std::sin(theta) * s.dt;
    r.progress += p.v * std::cos(theta) * s.dt;
    r.max_deviation = std::max(r.max_deviation, std::abs(d - p.d_ref));
    r.steps = i + 1;
    if (d <= 0.0 || d >= s.corridor) {
      crashed = true;
      break;
    }
  }
  if (std::abs(p.v) < s.stall_speed) r.behavior = Behavior::Stalled;
  else if (crashed) r.behavior = Behavior::Crash;
  else if (r.progress < 0.0) r.behavior = Behavior::WrongDirection;
  else if (r.max_deviation > s.max_deviation) r.behavior = Behavior::ExcessiveDeviation;
  else r.behavior = Behavior::Nominal;
  return r;
}

// ---------------------------------------------------------------------------
// Payload encoding

namespace {

constexpr char kPayloadMagic[4] = {'R', 'M', 'P', 'D'};

void put_f64(elf::Bytes& out, double v) {
  const auto bits = std::bit_cast<std::uint64_t>(v);
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(bits >> (8 * i)));
}

double get_f64(elf::ByteView in, std::size_t at) {
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(in[at + i]) << (8 * i);
  return std::bit_cast<double>(bits);
}

std::string fixed(double v, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

const std::array<std::string_view, 24> kWords = {
    "scan",  "range", "wall",   "angle", "steer", "lidar", "drive",  "error", "speed", "gain",  "theta", "delta",
    "rate",  "node",  "laser",  "index", "front", "left",  "offset", "alpha", "track", "queue", "msg",   "state"};

const std::array<std::string_view, 22> kLines = {
    "import rospy\n",
    "import math\n",
    "import numpy as np\n",
    "from sensor_msgs.msg import LaserScan\n",
    "from ackermann_msgs.msg import AckermannDriveStamped\n",
    "prev_error = 0.0\n",
    "integral = 0.0\n",
    "def get_range(data, angle):\n    index = int((angle - data.angle_min) / data.angle_increment)\n"
    "    return data.ranges[index]\n",
    "def follow_left(data, desired):\n    a = get_range(data, ANGLE_A)\n    b = get_range(data, ANGLE_B)\n",
    "    alpha = math.atan((a * math.cos(THETA) - b) / (a * math.sin(THETA)))\n",
    "    dist = b * math.cos(alpha)\n    return desired - dist\n",
    "def pid_control(error, velocity):\n    global prev_error\n",
    "    angle = STEER_SIGN * (-KP * error - KD * (error - prev_error))\n",
    "    prev_error = error\n",
    "    drive_msg = AckermannDriveStamped()\n    drive_msg.drive.steering_angle = angle\n",
    "    drive_msg.drive.speed = velocity\n    drive_pub.publish(drive_msg)\n",
    "def scan_callback(data):\n    error = follow_left(data, DESIRED_DISTANCE)\n    pid_control(error, VELOCITY)\n",
    "if __name__ == '__main__':\n    rospy.init_node('wall_follow', anonymous=True)\n",
    "    rospy.Subscriber('/scan', LaserScan, scan_callback)\n",
    "    drive_pub = rospy.Publisher('/drive', AckermannDriveStamped, queue_size=10)\n",
    "    rospy.spin()\n",
    "\n",
};

std::string random_word(Rng& rng) { return std::string(kWords[rng.below(kWords.size())]); }

struct RenderedParams {
  std::string kp, kd, v, d_ref, steer;
};

// One seeded filler fragment: a template line, a comment, a throwaway
// constant, or a statement with the controller constants inlined.
std::string filler_fragment(Rng& rng, const RenderedParams& c) {
  switch (rng.below(6)) {
    case 0:
    case 1:
      return std::string(kLines[rng.below(kLines.size())]);
    case 2: {
      std::string line = "# " + random_word(rng);
      for (std::uint64_t i = 0, n = 1 + rng.below(6); i < n; ++i) line += " " + random_word(rng);
      return line + "\n";
    }
    case 3:
      return random_word(rng) + "_" + random_word(rng) + " = " + fixed(rng.uniform(-10.0, 10.0), 3) + "\n";
    default:
      switch (rng.below(4)) {
        case 0: return "    angle = " + c.steer + " * (-" + c.kp + " * error - " + c.kd + " * (error - prev_error))\n";
        case 1: return "    drive_msg.drive.speed = " + c.v + "\n";
        case 2: return "    error = " + c.d_ref + " - dist\n";
        default: return "    pid_control(error, " + c.v + ")\n";
      }
  }
}

}  // namespace

elf::Bytes serialize_payload(const ControllerParams& p, std::size_t target_length, std::uint64_t noise_seed) {
  if (target_length < kPayloadMinLength || target_length > kPayloadMaxLength)
    throw std::invalid_argument("payload length " + std::to_string(target_length) + " outside [" +
                                std::to_string(kPayloadMinLength) + ", " + std::to_string(kPayloadMaxLength) + "]");
  if (p.steer_sign != 1 && p.steer_sign != -1) throw std::invalid_argument("steer_sign must be +1 or -1");

  elf::Bytes out(std::begin(kPayloadMagic), std::end(kPayloadMagic));
  for (double v : {p.kp, p.kd, p.v, p.d_ref}) put_f64(out, v);
  out.push_back(p.steer_sign > 0 ? 0x01 : 0xFF);

  // controller constants as the surrounding script would spell them; the
  // entry point repeats them so both ends of the payload carry the tuning
  const RenderedParams c{format_double(p.kp), format_double(p.kd), format_double(p.v), format_double(p.d_ref),
                         std::to_string(p.steer_sign)};
  std::string text = "\n# wall following controller\nKP = " + c.kp + "\nKD = " + c.kd + "\nVELOCITY = " + c.v +
                     "\nDESIRED_DISTANCE = " + c.d_ref + "\nSTEER_SIGN = " + c.steer + "\n";
  const std::string tail = "\nif __name__ == '__main__':\n    follow_wall(distance=" + c.d_ref + ", kp=" + c.kp +
                           ", kd=" + c.kd + ", velocity=" + c.v + ", steer=" + c.steer + ")\n";
  const std::size_t body = target_length - out.size() - tail.size();
  Rng rng(noise_seed);
  while (text.size() < body) text += filler_fragment(rng, c);
  text.resize(body);
  text += tail;
  out.insert(out.end(), text.begin(), text.end());
  return out;
}

ControllerParams decode_payload(elf::ByteView payload) {
  if (payload.size() < kPayloadHeaderSize)
    throw PayloadError("payload of " + std::to_string(payload.size()) + " bytes is shorter than its header");
  if (std::memcmp(payload.data(), kPayloadMagic, 4) != 0) throw PayloadError("payload magic is not RMPD");
  ControllerParams p;
  p.kp = get_f64(payload, 4);
  p.kd = get_f64(payload, 12);
  p.v = get_f64(payload, 20);
  p.d_ref = get_f64(payload, 28);
  const std::uint8_t steer = payload[36];
  if (steer != 0x01 && steer != 0xFF) throw PayloadError("invalid steer byte " + std::to_string(steer));
  p.steer_sign = steer == 0x01 ? 1 : -1;
  for (double v : {p.kp, p.kd, p.v, p.d_ref})
    if (!std::isfinite(v)) throw PayloadError("non-finite controller parameter");
  if (p.d_ref <= 0.0) throw PayloadError("d_ref must be positive");
  return p;
}

// ---------------------------------------------------------------------------
// Corpus generation

namespace {

// Tunings are drawn on a 1/32 grid, the way gains get dialed in by hand.
// Grid values are exact in binary, so the header doubles carry no
// per-file mantissa noise beyond the value itself.
constexpr double kTuningStep = 1.0 / 32.0;

double tuned(double x) { return std::round(x / kTuningStep) * kTuningStep; }

ControllerParams on_grid(ControllerParams p) {
  p.kp = tuned(p.kp);
  p.kd = tuned(p.kd);
  p.v = tuned(p.v);
  p.d_ref = tuned(p.d_ref);
  return p;
}

ControllerParams draw_good(Rng& rng) {
  ControllerParams p;
  p.kp = rng.uniform(1.0, 4.0);
  p.kd = rng.uniform(0.2, 1.0);
  p.v = rng.uniform(0.5, 1.5);
  p.d_ref = rng.uniform(0.5, 1.0);
  p.steer_sign = 1;
  return on_grid(p);
}

// Tampered controllers: start from a plausible tuning, then break one aspect.
ControllerParams draw_malware(Rng& rng) {
  ControllerParams p = draw_good(rng);
  switch (rng.below(6)) {
    case 0: p.steer_sign = -1; break;
    case 1: p.kp = -p.kp; break;
    case 2: p.v = rng.uniform(-0.04, 0.04); break;
    case 3: p.v = -rng.uniform(0.5, 1.5); break;
    case 4: p.kp = p.kd = 0.0; break;
    default:
      p.kp = rng.uniform(20.0, 60.0);
      p.kd = rng.uniform(0.0, 0.05);
      break;
  }
  return on_grid(p);
}

elf::Bytes random_bytes(Rng& rng, std::size_t n) {
  elf::Bytes b(n);
  for (auto& x : b) x = static_cast<std::uint8_t>(rng.below(256));
  return b;
}

double parse_double(const std::string& s, const std::string& what) {
  double v = 0.0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size())
    throw std::runtime_error("manifest: bad " + what + " value '" + s + "'");
  return v;
}

template <typename T>
T parse_integer(const std::string& s, const std::string& what) {
  T v{};
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size())
    throw std::runtime_error("manifest: bad " + what + " value '" + s + "'");
  return v;
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

}  // namespace

std::size_t CorpusManifest::malware_count() const {
  return static_cast<std::size_t>(std::count_if(rows.begin(), rows.end(), [](const auto& r) { return r.label == 1; }));
}

std::size_t malware_target(std::size_t count, double fraction) {
  if (count < 2) throw std::invalid_argument("corpus needs at least 2 samples to hold both classes");
  if (!(fraction > 0.0 && fraction < 1.0)) throw std::invalid_argument("malware fraction must lie in (0, 1)");
  const auto target = static_cast<std::size_t>(std::llround(static_cast<double>(count) * fraction));
  return std::clamp<std::size_t>(target, 1, count - 1);
}

CorpusManifest generate_corpus(const CorpusOptions& options, const std::filesystem::path& out_dir) {
  const std::size_t malware = malware_target(options.count, options.malware_fraction);
  std::vector<int> labels(options.count, 0);
  std::fill(labels.begin(), labels.begin() + static_cast<std::ptrdiff_t>(malware), 1);
  Rng order(derive_seed(options.seed, 0));
  order.shuffle(std::span<int>(labels));

  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw std::runtime_error("cannot create " + out_dir.string() + ": " + ec.message());

  CorpusManifest manifest;
  for (std::size_t i = 0; i < options.count; ++i) {
    const std::uint64_t sample_seed = derive_seed(options.seed, i + 1);
    Rng rng(sample_seed);
    const int want = labels[i];
    ControllerParams params;
    SimResult sim;
    std::size_t attempt = 0;
    for (; attempt < options.max_attempts; ++attempt) {
      params = want ? draw_malware(rng) : draw_good(rng);
      sim = simulate(params);
      if (label_for(sim.behavior) == want) break;
    }
    if (attempt == options.max_attempts)
      throw std::runtime_error("sample " + std::to_string(i) + ": no " + (want ? "malware" : "good") +
                               " parameter set found in " + std::to_string(options.max_attempts) + " draws");

    const std::size_t length = kPayloadMinLength + rng.below(kPayloadMaxLength - kPayloadMinLength + 1);
    elf::ElfBuildSpec spec;
    spec.sections.emplace_back(".text", random_bytes(rng, 64 + rng.below(449)));
    constexpr char rodata[] = "wall_follow\0/scan\0/drive";
    spec.sections.emplace_back(".rodata", elf::Bytes(std::begin(rodata), std::end(rodata)));
    spec.sections.emplace_back(std::string(kPayloadSection), serialize_payload(params, length, rng.next()));
    spec.payload_section = std::string(kPayloadSection);

    char name[32];
    std::snprintf(name, sizeof name, "sample_%04zu.elf", i);
    elf::write_file(out_dir / name, elf::build_elf(spec));

    ManifestRow row;
    row.filename = name;
    row.label = want;
    row.params = params;
    row.behavior = sim.behavior;
    row.payload_length = length;
    row.seed = sample_seed;
    manifest.rows.push_back(std::move(row));
  }
  write_manifest(manifest, out_dir / kManifestName);
  return manifest;
}

void write_manifest(const CorpusManifest& manifest, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "filename,label,kp,kd,v,d_ref,steer_sign,behavior,payload_length,seed\n";
  for (const auto& r : manifest.rows) {
    out << r.filename << ',' << r.label << ',' << format_double(r.params.kp) << ',' << format_double(r.params.kd)
        << ',' << format_double(r.params.v) << ',' << format_double(r.params.d_ref) << ',' << r.params.steer_sign
        << ',' << to_string(r.behavior) << ',' << r.payload_length << ',' << r.seed << '\n';
  }
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

CorpusManifest read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open manifest " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error("manifest " + path.string() + " is empty");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  std::map<std::string, std::size_t> col;
  const auto header = split_csv(line);
  for (std::size_t i = 0; i < header.size(); ++i) col[header[i]] = i;
  for (const char* required : {"filename", "label"})
    if (!col.count(required)) throw std::runtime_error("manifest lacks a '" + std::string(required) + "' column");

  CorpusManifest m;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto cells = split_csv(line);
    if (cells.size() != header.size())
      throw std::runtime_error("manifest line " + std::to_string(line_no) + ": expected " +
                               std::to_string(header.size()) + " fields, got " + std::to_string(cells.size()));
    auto has = [&](const char* name) { return col.count(name) > 0; };
    auto cell = [&](const char* name) -> const std::string& { return cells[col.at(name)]; };
    ManifestRow r;
    r.filename = cell("filename");
    r.label = parse_integer<int>(cell("label"), "label");
    if (r.label != 0 && r.label != 1)
      throw std::runtime_error("manifest line " + std::to_string(line_no) + ": label must be 0 or 1");
    if (has("kp")) r.params.kp = parse_double(cell("kp"), "kp");
    if (has("kd")) r.params.kd = parse_double(cell("kd"), "kd");
    if (has("v")) r.params.v = parse_double(cell("v"), "v");
    if (has("d_ref")) r.params.d_ref = parse_double(cell("d_ref"), "d_ref");
    if (has("steer_sign")) r.params.steer_sign = parse_integer<int>(cell("steer_sign"), "steer_sign");
    if (has("behavior")) r.behavior = parse_behavior(cell("behavior"));
    else r.behavior = r.label ? Behavior::Crash : Behavior::Nominal;
    if (has("payload_length")) r.payload_length = parse_integer<std::size_t>(cell("payload_length"), "payload_length");
    if (has("seed")) r.seed = parse_integer<std::uint64_t>(cell("seed"), "seed");
    m.rows.push_back(std::move(r));
  }
  return m;
}

}  // namespace robomal
