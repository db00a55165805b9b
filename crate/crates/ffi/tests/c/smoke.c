#include <stdio.h>
#include <string.h>

#include "ssmlab.h"

int main(int argc, char **argv) {
    if (argc != 2) {
        return 10;
    }
    SsmlabModel *model = NULL;
    if (ssmlab_model_new(SSMLAB_ARCH_VSSM_HIER, 4, &model) != SSMLAB_STATUS_OK) {
        return 11;
    }
    size_t h, w, c, k;
    if (ssmlab_model_shape(model, &h, &w, &c, &k) != SSMLAB_STATUS_OK || k != 10) {
        return 12;
    }
    static float pixels[32 * 32 * 3];
    static float adv[32 * 32 * 3];
    size_t len = h * w * c;
    for (size_t i = 0; i < len; i++) {
        pixels[i] = (float)(i % 7) / 6.0f;
    }
    float logits[10];
    if (ssmlab_model_logits(model, pixels, len, logits, k) != SSMLAB_STATUS_OK) {
        return 13;
    }
    SsmlabAttackParams params = ssmlab_attack_defaults(SSMLAB_ATTACK_FGSM);
    bool success = false;
    if (ssmlab_attack(model, &params, pixels, len, 1, adv, &success) != SSMLAB_STATUS_OK) {
        return 14;
    }
    for (size_t i = 0; i < len; i++) {
        float d = adv[i] - pixels[i];
        if (d > params.epsilon + 1e-6f || d < -params.epsilon - 1e-6f) {
            return 15;
        }
    }
    if (ssmlab_model_save(model, argv[1]) != SSMLAB_STATUS_OK) {
        return 16;
    }
    ssmlab_model_free(model);
    SsmlabModel *back = NULL;
    if (ssmlab_model_load("/nonexistent/x.ssmr", &back) != SSMLAB_STATUS_IO || back != NULL) {
        return 17;
    }
    if (strstr(ssmlab_last_error(), "nonexistent") == NULL) {
        return 18;
    }
    if (ssmlab_model_load(argv[1], &back) != SSMLAB_STATUS_OK) {
        return 19;
    }
    float again[10];
    if (ssmlab_model_logits(back, pixels, len, again, k) != SSMLAB_STATUS_OK || memcmp(again, logits, sizeof logits) != 0) {
        return 20;
    }
    ssmlab_model_free(back);
    printf("ok %s\n", ssmlab_version());
    return 0;
}
