#include "cil/checkpoint.hpp"

#include <cstring>
#include <string>

#include "cil/binio.hpp"
#include "cil/error.hpp"

namespace cil {

namespace {

constexpr char kMagic[4] = {'C', 'I', 'L', 'M'};
constexpr std::uint16_t kVersion = 1;

bool bit_equal(const std::map<std::string, Tensor>& a, const std::map<std::string, Tensor>& b) {
  if (a.size() != b.size()) return false;
  auto ib = b.begin();
  for (const auto& [name, t] : a) {
    if (ib->first != name || ib->second.shape() != t.shape()) return false;
    if (t.size() && std::memcmp(t.storage().data(), ib->second.storage().data(), t.size() * sizeof(double)) != 0)
      return false;
    ++ib;
  }
  return true;
}

void put_tensors(binio::Writer& w, const std::map<std::string, Tensor>& tensors) {
  w.put<std::uint32_t>(static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) {
    if (name.size() > 0xFFFF) throw ContractError("checkpoint: tensor name too long");
    w.put<std::uint16_t>(static_cast<std::uint16_t>(name.size()));
    w.put_string(name);
    w.put<std::uint8_t>(static_cast<std::uint8_t>(t.rank()));
    for (auto d : t.shape()) w.put<std::uint32_t>(static_cast<std::uint32_t>(d));
    w.put_bytes(reinterpret_cast<const std::uint8_t*>(t.storage().data()), t.size() * sizeof(double));
  }
}

std::map<std::string, Tensor> get_tensors(binio::Reader& r, const char* section) {
  std::map<std::string, Tensor> out;
  const auto n = r.get<std::uint32_t>("tensor count");
  for (std::uint32_t i = 0; i < n; ++i) {
    r.set_record(i);
    const auto len = r.get<std::uint16_t>("tensor name length");
    std::string name = r.get_string(len, "tensor name");
    const auto rank = r.get<std::uint8_t>("tensor rank");
    Shape shape(rank);
    std::size_t size = 1;
    for (auto& d : shape) {
      d = r.get<std::uint32_t>("tensor dimension");
      size *= d;
    }
    if (size > r.remaining() / sizeof(double)) r.fail(std::string("truncated file: expected ") + section + " values");
    std::vector<double> values(size);
    std::memcpy(values.data(), r.take(size * sizeof(double), "tensor values"), size * sizeof(double));
    if (!out.emplace(std::move(name), Tensor(std::move(shape), std::move(values))).second) {
      r.fail(std::string("duplicate ") + section + " tensor");
    }
  }
  r.set_record(std::nullopt);
  return out;
}

}  // namespace

bool Checkpoint::operator==(const Checkpoint& other) const {
  return step == other.step && channels == other.channels && height == other.height &&
         width == other.width && model.spec == other.model.spec && store == other.store &&
         bit_equal(model.params, other.model.params) && bit_equal(model.buffers, other.model.buffers);
}

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt) {
  binio::Writer w;
  w.put_bytes(reinterpret_cast<const std::uint8_t*>(kMagic), 4);
  w.put<std::uint16_t>(kVersion);
  w.put<std::uint32_t>(ckpt.step);

  const ModelSpec& s = ckpt.model.spec;
  auto u32 = [&](std::size_t v) { w.put<std::uint32_t>(static_cast<std::uint32_t>(v)); };
  u32(s.image_size);
  u32(s.in_channels);
  w.put<std::uint8_t>(s.stem == StemKind::conv ? 1 : 0);
  u32(s.patch_size);
  u32(s.stem_channels.size());
  for (auto c : s.stem_channels) u32(c);
  u32(s.embed_dim);
  u32(s.num_blocks);
  u32(s.num_heads);
  u32(s.mlp_ratio);
  u32(s.num_classes);
  w.put<double>(s.initial_temperature);

  put_tensors(w, ckpt.model.params);
  put_tensors(w, ckpt.model.buffers);

  const BudgetPolicy& policy = ckpt.store.policy();
  w.put<std::uint8_t>(policy.kind == BudgetPolicy::Kind::total ? 1 : 0);
  u32(policy.amount);
  w.put<std::uint16_t>(ckpt.channels);
  w.put<std::uint16_t>(ckpt.height);
  w.put<std::uint16_t>(ckpt.width);
  const std::size_t pixels = std::size_t{ckpt.channels} * ckpt.height * ckpt.width;
  u32(ckpt.store.classes().size());
  for (const auto& [id, list] : ckpt.store.classes()) {
    w.put<std::uint16_t>(id);
    u32(list.size());
    for (const Pixels& px : list) {
      if (px.size() != pixels) throw DimensionError("checkpoint: exemplar size does not match the image geometry");
      w.put<std::uint16_t>(id);
      w.put_bytes(px.data(), px.size());
    }
  }
  return w.take();
}

Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
  binio::Reader r(bytes);
  if (std::memcmp(r.take(4, "magic"), kMagic, 4) != 0) throw ParseError("bad magic", 0);
  if (r.get<std::uint16_t>("version") != kVersion) r.fail("unsupported checkpoint version");

  Checkpoint ckpt;
  ckpt.step = r.get<std::uint32_t>("step");
  ModelSpec& s = ckpt.model.spec;
  auto u32 = [&](const char* what) { return std::size_t{r.get<std::uint32_t>(what)}; };
  s.image_size = u32("image_size");
  s.in_channels = u32("in_channels");
  const auto stem = r.get<std::uint8_t>("stem");
  if (stem > 1) r.fail("unknown stem kind");
  s.stem = stem ? StemKind::conv : StemKind::patchify;
  s.patch_size = u32("patch_size");
  const std::size_t depth = u32("stem depth");
  if (depth > r.remaining() / 4) r.fail("truncated file: expected stem channels");
  s.stem_channels.resize(depth);
  for (auto& c : s.stem_channels) c = u32("stem channels");
  s.embed_dim = u32("embed_dim");
  s.num_blocks = u32("num_blocks");
  s.num_heads = u32("num_heads");
  s.mlp_ratio = u32("mlp_ratio");
  s.num_classes = u32("num_classes");
  s.initial_temperature = r.get<double>("initial_temperature");

  ckpt.model.params = get_tensors(r, "parameter");
  ckpt.model.buffers = get_tensors(r, "buffer");
  if (!ckpt.model.params.count(kClassifierWeight) || !ckpt.model.params.count(kTemperature)) {
    r.fail("checkpoint lacks classifier parameters");
  }

  const auto kind = r.get<std::uint8_t>("budget policy");
  if (kind > 1) r.fail("unknown budget policy");
  const std::size_t amount = u32("budget amount");
  ckpt.store = ExemplarStore(kind ? BudgetPolicy::total(amount) : BudgetPolicy::per_class(amount));
  ckpt.channels = r.get<std::uint16_t>("channels");
  ckpt.height = r.get<std::uint16_t>("height");
  ckpt.width = r.get<std::uint16_t>("width");
  const std::size_t pixels = std::size_t{ckpt.channels} * ckpt.height * ckpt.width;
  const std::size_t classes = u32("exemplar class count");
  std::size_t record = 0;
  for (std::size_t c = 0; c < classes; ++c) {
    const auto id = r.get<std::uint16_t>("class id");
    if (ckpt.store.classes().count(id)) r.fail("duplicate exemplar class " + std::to_string(id));
    const std::size_t count = u32("exemplar count");
    std::vector<Pixels> list;
    for (std::size_t i = 0; i < count; ++i, ++record) {
      r.set_record(record);
      const std::size_t at = r.offset();
      if (r.get<std::uint16_t>("exemplar label") != id) {
        throw ParseError("exemplar label does not match its class", at, record);
      }
      const auto* p = r.take(pixels, "exemplar pixels");
      list.emplace_back(p, p + pixels);
    }
    r.set_record(std::nullopt);
    ckpt.store.restore(id, std::move(list));
  }
  if (r.remaining() != 0) r.fail("trailing bytes after exemplar store");
  return ckpt;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  binio::write_file(path, encode_checkpoint(ckpt));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(binio::read_file(path));
}

}  // namespace cil
