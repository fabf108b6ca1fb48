#include <stdio.h>
#include <string.h>
#include "ir2qsm.h"

#define CHECK(call)                                                        \
    do {                                                                   \
        Ir2Status s_ = (call);                                             \
        if (s_ != IR2_STATUS_OK) {                                         \
            fprintf(stderr, "%s -> %d: %s\n", #call, s_, ir2_last_error()); \
            return 1;                                                      \
        }                                                                  \
    } while (0)

int main(int argc, char **argv) {
    if (argc < 2) return 2;
    double vs[3] = {1.0, 1.0, 1.0};
    float data[512];
    for (int i = 0; i < 512; i++) data[i] = (i % 7 == 0) ? 0.1f : 0.0f;
    Ir2Volume *chi = NULL, *field = NULL, *rec = NULL, *back = NULL;
    CHECK(ir2_volume_new(8, 8, 8, vs, data, &chi));
    CHECK(ir2_forward_field(chi, &field));
    CHECK(ir2_tkd_invert(field, 0.2, &rec));
    CHECK(ir2_volume_write(rec, argv[1]));
    CHECK(ir2_volume_read(argv[1], &back));
    size_t dims[3];
    CHECK(ir2_volume_dims(back, dims));
    if (dims[0] != 8 || dims[1] != 8 || dims[2] != 8) return 3;
    double nrmse, hfen, ssim;
    CHECK(ir2_metrics(chi, chi, &nrmse, &hfen, &ssim));
    if (nrmse != 0.0 || ssim != 1.0) return 4;
    if (ir2_volume_dims(NULL, dims) != IR2_STATUS_NULL) return 5;
    if (strlen(ir2_last_error()) == 0) return 6;
    if (ir2_volume_read("/nonexistent/x.qsmv", &back) != IR2_STATUS_IO) return 7;
    ir2_volume_free(chi);
    ir2_volume_free(field);
    ir2_volume_free(rec);
    ir2_volume_free(back);
    printf("ok %s\n", ir2_version());
    return 0;
}
