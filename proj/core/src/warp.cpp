#include "ddn/warp.hpp"

#include <algorithm>

#include "ddn/errors.hpp"
#include "ddn/threading.hpp"

namespace ddn {

Volume3 warp_volume(const Volume3& vol, const DisplacementField& field) {
    if (vol.dx != field.dx || vol.dy != field.dy || vol.dz != field.dz)
        throw config_error("warp_volume: volume/field dimension mismatch");

    Volume3 out(vol.dx, vol.dy, vol.dz);
    out.sx = vol.sx;
    out.sy = vol.sy;
    out.sz = vol.sz;

    parallel_for(vol.dz, [&](std::int64_t z64) {
        const int z = int(z64);
        for (int y = 0; y < vol.dy; ++y) {
            const std::size_t row = field.index(0, y, z);
            for (int x = 0; x < vol.dx; ++x) {
                const std::size_t i = row + std::size_t(x);
                out.data[i] = trilinear_sample(vol, float(x) + field.ux[i],
                                               float(y) + field.uy[i],
                                               float(z) + field.uz[i]);
            }
        }
    });
    return out;
}

} // namespace ddn
